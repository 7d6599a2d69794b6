#pragma once

// One command per output directory. The lock file holds the owner's pid; a
// lock whose process no longer exists is taken over.

#include <fcntl.h>
#include <signal.h>
#include <unistd.h>

#include <cerrno>
#include <filesystem>
#include <fstream>
#include <string>

#include "cinemae/error.hpp"

namespace cinemae::cli {

class DirLock {
public:
    explicit DirLock(const std::filesystem::path& dir) : path_(dir / ".cinemae.lock") {
        std::filesystem::create_directories(dir);
        for (int attempt = 0; attempt < 2; ++attempt) {
            const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
            if (fd >= 0) {
                const std::string pid = std::to_string(::getpid()) + "\n";
                [[maybe_unused]] auto n = ::write(fd, pid.data(), pid.size());
                ::close(fd);
                return;
            }
            if (errno != EEXIST) throw IoError("cannot create lock " + path_.string());
            if (!stale()) break;
            std::filesystem::remove(path_);
        }
        throw IoError("output directory is locked by another process (" + path_.string() + ")");
    }
    ~DirLock() {
        std::error_code ec;
        std::filesystem::remove(path_, ec);
    }
    DirLock(const DirLock&) = delete;
    DirLock& operator=(const DirLock&) = delete;

private:
    bool stale() const {
        std::ifstream in(path_);
        long pid = 0;
        if (!(in >> pid) || pid <= 0) return true;
        return ::kill(static_cast<pid_t>(pid), 0) != 0 && errno == ESRCH;
    }

    std::filesystem::path path_;
};

}  // namespace cinemae::cli
