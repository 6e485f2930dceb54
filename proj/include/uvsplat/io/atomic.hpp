#pragma once

#include "uvsplat/math.hpp"

#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <system_error>

namespace uvsplat::io {

/// Writes through a sibling temp file and renames it over `path`, so readers
/// never observe a partial file.
inline void write_atomically(const std::string& path, const std::function<void(std::ostream&)>& body) {
  namespace fs = std::filesystem;
  const fs::path target(path);
  if (target.has_parent_path()) fs::create_directories(target.parent_path());
  fs::path tmp = target;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw DataError("cannot open '" + tmp.string() + "' for writing");
    try {
      body(os);
    } catch (...) {
      os.close();
      std::error_code ec;
      fs::remove(tmp, ec);
      throw;
    }
    os.flush();
    if (!os) {
      std::error_code ec;
      fs::remove(tmp, ec);
      throw DataError("write failed for '" + path + "'");
    }
  }
  fs::rename(tmp, target);
}

}  // namespace uvsplat::io
