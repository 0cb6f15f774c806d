#pragma once

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <unistd.h>

#include "mmctl/model.hpp"

namespace test {

// True when the reference write-up contains `phrase` verbatim.
inline bool source_says(const std::string& phrase) {
  std::ifstream in(MMCTL_SOURCE_TEXT);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str().find(phrase) != std::string::npos;
}

// Fresh scratch directory under the system temp dir, removed on scope exit.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    path_ = std::filesystem::temp_directory_path() / ("mmctl_test_" + tag + "_" + std::to_string(::getpid()));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() { std::filesystem::remove_all(path_); }
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& s) const { return path_ / s; }

 private:
  std::filesystem::path path_;
};

inline std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Small model matching the default 32x32 / patch 8 / 64-sample world.
inline mmctl::ModelConfig tiny_model(mmctl::Index layers = 2, mmctl::Index d_model = 16) {
  mmctl::ModelConfig m;
  m.layers = layers;
  m.d_model = d_model;
  m.heads = 2;
  m.ffn_mult = 2;
  m.sigma_dim = 8;
  m.text = {64, 8, 16};
  return m;
}

}  // namespace test
