#include "fairdistill/hash.hpp"

#include <cstdio>
#include <fstream>
#include <iterator>

#include "fairdistill/error.hpp"

namespace fd {

std::uint32_t fnv1a32_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot read " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)),
                    std::istreambuf_iterator<char>());
  return fnv1a32(bytes);
}

std::string hex32(std::uint32_t h) {
  char buf[9];
  std::snprintf(buf, sizeof buf, "%08x", h);
  return buf;
}

}  // namespace fd
