#pragma once

#include "dualroi/errors.hpp"

#include <istream>
#include <ostream>
#include <string>

namespace dualroi::binio {

template <class T>
void put(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <class T>
T get(std::istream& in, const char* what) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!in) throw IoError(std::string(what) + ": truncated");
  return v;
}

inline void expect_magic(std::istream& in, const char (&magic)[5], const char* what) {
  char buf[4];
  in.read(buf, 4);
  if (!in || std::string(buf, 4) != std::string(magic, 4)) throw IoError(std::string(what) + ": bad magic");
}

}  // namespace dualroi::binio
