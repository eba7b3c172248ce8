// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <fcntl.h>
#include <signal.h>
#include <sys/wait.h>
#include <unistd.h>

#include <chrono>
#include <fstream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace flowlens::testing {

// A child process with stdout and stderr captured to files.
class ChildProcess {
public:
    struct Options {
        std::string stdout_path;
        std::string stderr_path;
        bool drop_to_nobody = false; // only meaningful when running as root
    };

    ChildProcess(const std::string& exe, const std::vector<std::string>& args, const Options& o) : opts_(o) {
        pid_ = ::fork();
        if (pid_ < 0) throw std::runtime_error("fork failed");
        if (pid_ == 0) {
            redirect(o.stdout_path, STDOUT_FILENO);
            redirect(o.stderr_path, STDERR_FILENO);
            if (o.drop_to_nobody && ::geteuid() == 0) {
                if (::setgid(65534) != 0 || ::setuid(65534) != 0) ::_exit(126);
            }
            std::vector<char*> argv;
            argv.push_back(const_cast<char*>(exe.c_str()));
            for (const auto& a : args) argv.push_back(const_cast<char*>(a.c_str()));
            argv.push_back(nullptr);
            ::execv(exe.c_str(), argv.data());
            ::_exit(127);
        }
    }

    ~ChildProcess() {
        if (pid_ > 0 && !status_) {
            ::kill(pid_, SIGKILL);
            int st = 0;
            ::waitpid(pid_, &st, 0);
        }
    }

    ChildProcess(const ChildProcess&) = delete;
    ChildProcess& operator=(const ChildProcess&) = delete;

    void signal(int sig) { ::kill(pid_, sig); }

    // Exit code, or nullopt on timeout or abnormal termination.
    std::optional<int> wait_for(std::chrono::milliseconds timeout) {
        const auto deadline = std::chrono::steady_clock::now() + timeout;
        while (!status_) {
            int st = 0;
            const pid_t r = ::waitpid(pid_, &st, WNOHANG);
            if (r == pid_) {
                status_ = st;
                break;
            }
            if (std::chrono::steady_clock::now() >= deadline) return std::nullopt;
            std::this_thread::sleep_for(std::chrono::milliseconds(5));
        }
        if (!WIFEXITED(*status_)) return std::nullopt;
        return WEXITSTATUS(*status_);
    }

    std::string out() const { return slurp(opts_.stdout_path); }
    std::string err() const { return slurp(opts_.stderr_path); }

private:
    static void redirect(const std::string& path, int fd) {
        const int f = ::open(path.c_str(), O_WRONLY | O_CREAT | O_TRUNC, 0666);
        if (f < 0) ::_exit(125);
        ::dup2(f, fd);
        ::close(f);
    }

    static std::string slurp(const std::string& path) {
        std::ifstream in(path);
        std::stringstream ss;
        ss << in.rdbuf();
        return ss.str();
    }

    Options opts_;
    pid_t pid_ = -1;
    std::optional<int> status_;
};

} // namespace flowlens::testing
