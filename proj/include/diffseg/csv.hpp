#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "diffseg/common.hpp"

namespace diffseg {

// Fixed-precision number formatting so logs and reports are byte-stable.
inline std::string csv_num(double v, int precision = 6) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", precision, v);
  return buf;
}

class CsvLogger {
 public:
  CsvLogger() = default;

  // Opens for append; writes the header only when creating the file.
  CsvLogger(const std::string& path, const std::string& header) {
    if (path.empty()) return;
    std::filesystem::path p(path);
    if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
    bool fresh = !std::filesystem::exists(p) || std::filesystem::file_size(p) == 0;
    os_.open(p, std::ios::app);
    require_data(os_.good(), "csv: cannot open ", path);
    if (fresh) os_ << header << "\n";
  }

  bool active() const { return os_.is_open(); }

  void row(const std::vector<std::string>& cells) {
    if (!os_.is_open()) return;
    for (size_t i = 0; i < cells.size(); ++i) {
      if (i) os_ << ',';
      os_ << cells[i];
    }
    os_ << '\n';
    os_.flush();
  }

 private:
  std::ofstream os_;
};

}  // namespace diffseg
