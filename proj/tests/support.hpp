#pragma once

// Shared fixtures: scratch directories and small asset sets (fonts copied
// from the system font directory, procedural backgrounds).

#include <atomic>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include <unistd.h>

#include "swaptext/dataforge.hpp"

namespace swaptext::testing {

namespace fs = std::filesystem;

class ScratchDir {
 public:
  explicit ScratchDir(const std::string& tag) {
    static std::atomic<int> counter{0};
    path_ = fs::temp_directory_path() /
            ("swaptext_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~ScratchDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  ScratchDir(const ScratchDir&) = delete;
  ScratchDir& operator=(const ScratchDir&) = delete;

  const fs::path& path() const noexcept { return path_; }
  fs::path operator/(const std::string& child) const { return path_ / child; }

 private:
  fs::path path_;
};

inline const std::vector<std::string>& test_font_names() {
  static const std::vector<std::string> names{"DejaVuSans.ttf", "DejaVuSerif-Bold.ttf", "DejaVuSansMono.ttf"};
  return names;
}

/// Copies the first `count` test fonts into `dir`.
inline fs::path make_font_dir(const fs::path& dir, std::size_t count) {
  fs::create_directories(dir);
  for (std::size_t i = 0; i < count; ++i) {
    fs::copy_file(fs::path(SWAPTEXT_DEFAULT_FONT_DIR) / test_font_names().at(i), dir / test_font_names()[i],
                  fs::copy_options::overwrite_existing);
  }
  return dir;
}

inline fs::path make_background_dir(const fs::path& dir, std::size_t count, std::uint64_t seed = 17) {
  data::generate_backgrounds(dir, count, seed);
  return dir;
}

}  // namespace swaptext::testing
