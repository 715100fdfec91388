#include <cstdio>
int main() { std::puts("editshield: CLI under construction"); return 0; }
