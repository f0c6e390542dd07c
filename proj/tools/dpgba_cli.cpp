#include <cstdio>

int main() {
  std::fprintf(stderr, "usage: dpgba <synth|attack|defend|eval|matrix|export> ...\n");
  return 2;
}
