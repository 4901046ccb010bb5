#include <cstdio>
int main() { std::puts("hte cli placeholder"); return 0; }
