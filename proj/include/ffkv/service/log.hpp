#pragma once

#include <fcntl.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ffkv/numerics/matrix.hpp"

namespace ffkv {

// JSONL append log. Every record is one line, written with a single write()
// and fsync'd before append() returns.
class AppendLog {
 public:
  AppendLog() = default;
  explicit AppendLog(std::filesystem::path path) : path_(std::move(path)) {
    if (path_.has_parent_path()) std::filesystem::create_directories(path_.parent_path());
    fd_ = ::open(path_.c_str(), O_WRONLY | O_CREAT | O_APPEND | O_CLOEXEC, 0644);
    if (fd_ < 0) throw Error("append log: cannot open " + path_.string() + ": " + std::strerror(errno));
  }
  AppendLog(const AppendLog&) = delete;
  AppendLog& operator=(const AppendLog&) = delete;
  AppendLog(AppendLog&& o) noexcept : path_(std::move(o.path_)), fd_(o.fd_) { o.fd_ = -1; }
  AppendLog& operator=(AppendLog&& o) noexcept {
    std::swap(path_, o.path_);
    std::swap(fd_, o.fd_);
    return *this;
  }
  ~AppendLog() {
    if (fd_ >= 0) ::close(fd_);
  }

  bool is_open() const { return fd_ >= 0; }
  const std::filesystem::path& path() const { return path_; }

  void append(const nlohmann::json& record) {
    if (fd_ < 0) return;  // in-memory store
    const std::string line = record.dump() + "\n";
    std::size_t done = 0;
    while (done < line.size()) {
      const ssize_t n = ::write(fd_, line.data() + done, line.size() - done);
      if (n < 0) {
        if (errno == EINTR) continue;
        throw Error("append log: write failed: " + std::string(std::strerror(errno)));
      }
      done += static_cast<std::size_t>(n);
    }
    if (::fsync(fd_) != 0) throw Error("append log: fsync failed: " + std::string(std::strerror(errno)));
  }

  // A torn final line (crash mid-write) is dropped; a bad line anywhere else
  // is corruption.
  static std::vector<nlohmann::json> read(const std::filesystem::path& path) {
    std::vector<nlohmann::json> out;
    std::ifstream in(path);
    if (!in) return out;
    std::vector<std::string> lines;
    for (std::string line; std::getline(in, line);)
      if (!line.empty()) lines.push_back(std::move(line));
    for (std::size_t i = 0; i < lines.size(); ++i) {
      try {
        out.push_back(nlohmann::json::parse(lines[i]));
      } catch (const nlohmann::json::parse_error&) {
        if (i + 1 == lines.size()) break;
        throw Error("append log: corrupt record on line " + std::to_string(i + 1) + " of " + path.string());
      }
    }
    return out;
  }

 private:
  std::filesystem::path path_;
  int fd_ = -1;
};

}  // namespace ffkv
