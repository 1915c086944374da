#include <iostream>
int main() { std::cout << "iclstreams: under construction\n"; return 1; }
