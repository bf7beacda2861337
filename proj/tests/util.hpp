#pragma once

#include <atomic>
#include <filesystem>
#include <random>
#include <string>

namespace testutil {

namespace fs = std::filesystem;

// Scratch directory removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag = "scanflow") {
        static std::atomic<int> counter{0};
        std::random_device rd;
        path_ = fs::temp_directory_path() /
                (tag + "_" + std::to_string(rd()) + "_" + std::to_string(counter++));
        fs::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        fs::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const fs::path& path() const { return path_; }
    fs::path operator/(const std::string& s) const { return path_ / s; }

private:
    fs::path path_;
};

} // namespace testutil
