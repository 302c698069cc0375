// Command-line entry point. Subcommands arrive as the library grows.
#include <cstdio>

int main() {
  std::puts("flowplan: no subcommands wired yet");
  return 1;
}
