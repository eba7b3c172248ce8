// SPDX-License-Identifier: Apache-2.0

#include "flowlens/sys.hpp"

#include <arpa/inet.h>
#include <fcntl.h>
#include <netinet/in.h>
#include <unistd.h>

#include <atomic>
#include <cerrno>
#include <cstring>

namespace flowlens {

void UniqueFd::reset(int fd) {
    if (fd_ >= 0) ::close(fd_);
    fd_ = fd;
}

std::system_error errno_error(const char* what) { return errno_error(what, errno); }

std::system_error errno_error(const char* what, int err) {
    return std::system_error(err, std::generic_category(), what);
}

std::int64_t SteadyClock::now_ns() const {
    timespec ts{};
    ::clock_gettime(CLOCK_MONOTONIC, &ts);
    return static_cast<std::int64_t>(ts.tv_sec) * 1'000'000'000 + ts.tv_nsec;
}

void sleep_until_ns(std::int64_t deadline_ns) {
    if (deadline_ns < 0) return;
    timespec ts{static_cast<time_t>(deadline_ns / 1'000'000'000), static_cast<long>(deadline_ns % 1'000'000'000)};
    while (::clock_nanosleep(CLOCK_MONOTONIC, TIMER_ABSTIME, &ts, nullptr) == EINTR) {
    }
}

const Clock& steady_clock() {
    static const SteadyClock clock;
    return clock;
}

std::int64_t monotonic_wall_us() {
    static std::atomic<std::int64_t> last{0};
    const std::int64_t now =
        std::chrono::duration_cast<std::chrono::microseconds>(std::chrono::system_clock::now().time_since_epoch())
            .count();
    std::int64_t prev = last.load(std::memory_order_relaxed);
    while (true) {
        const std::int64_t next = now > prev ? now : prev;
        if (last.compare_exchange_weak(prev, next, std::memory_order_relaxed)) return next;
    }
}

sockaddr_in to_sockaddr(const Endpoint& ep) {
    sockaddr_in sa{};
    sa.sin_family = AF_INET;
    sa.sin_port = htons(ep.port);
    sa.sin_addr.s_addr = htonl(ep.addr.value);
    return sa;
}

Endpoint from_sockaddr(const sockaddr_in& sa) { return {Ipv4Addr(ntohl(sa.sin_addr.s_addr)), ntohs(sa.sin_port)}; }

int PosixSocketApi::socket(int domain, int type, int protocol) { return ::socket(domain, type, protocol); }

int PosixSocketApi::connect(int fd, const sockaddr* addr, socklen_t len) { return ::connect(fd, addr, len); }

ssize_t PosixSocketApi::sendto(int fd, const void* buf, std::size_t len, int flags, const sockaddr* addr,
                               socklen_t addrlen) {
    return ::sendto(fd, buf, len, flags, addr, addrlen);
}

ssize_t PosixSocketApi::recvfrom(int fd, void* buf, std::size_t len, int flags, sockaddr* addr, socklen_t* addrlen) {
    return ::recvfrom(fd, buf, len, flags, addr, addrlen);
}

int PosixSocketApi::setsockopt(int fd, int level, int name, const void* value, socklen_t len) {
    return ::setsockopt(fd, level, name, value, len);
}

PosixSocketApi& posix_sockets() {
    static PosixSocketApi api;
    return api;
}

int DelayingSocketApi::connect(int fd, const sockaddr* addr, socklen_t len) {
    // Absolute deadline so that early wakeups cannot shorten the delay.
    timespec deadline{};
    ::clock_gettime(CLOCK_MONOTONIC, &deadline);
    const auto total_ns = static_cast<long long>(deadline.tv_nsec) + delay_.count() * 1000LL;
    deadline.tv_sec += static_cast<time_t>(total_ns / 1'000'000'000);
    deadline.tv_nsec = static_cast<long>(total_ns % 1'000'000'000);
    while (::clock_nanosleep(CLOCK_MONOTONIC, TIMER_ABSTIME, &deadline, nullptr) == EINTR) {
    }
    return inner_.connect(fd, addr, len);
}

void RedirectingSocketApi::add(const Endpoint& from, const Endpoint& to) {
    std::lock_guard lk(mu_);
    forward_[from] = to;
    backward_[to] = from;
}

std::optional<Endpoint> RedirectingSocketApi::lookup(const std::map<Endpoint, Endpoint>& table, const sockaddr* addr,
                                                     socklen_t len) const {
    if (addr == nullptr || len < sizeof(sockaddr_in) || addr->sa_family != AF_INET) return std::nullopt;
    sockaddr_in sa{};
    std::memcpy(&sa, addr, sizeof sa);
    std::lock_guard lk(mu_);
    auto it = table.find(from_sockaddr(sa));
    if (it == table.end()) return std::nullopt;
    return it->second;
}

int RedirectingSocketApi::connect(int fd, const sockaddr* addr, socklen_t len) {
    if (auto to = lookup(forward_, addr, len)) {
        const sockaddr_in sa = to_sockaddr(*to);
        return inner_.connect(fd, reinterpret_cast<const sockaddr*>(&sa), sizeof sa);
    }
    return inner_.connect(fd, addr, len);
}

ssize_t RedirectingSocketApi::sendto(int fd, const void* buf, std::size_t len, int flags, const sockaddr* addr,
                                     socklen_t addrlen) {
    if (auto to = lookup(forward_, addr, addrlen)) {
        const sockaddr_in sa = to_sockaddr(*to);
        return inner_.sendto(fd, buf, len, flags, reinterpret_cast<const sockaddr*>(&sa), sizeof sa);
    }
    return inner_.sendto(fd, buf, len, flags, addr, addrlen);
}

ssize_t RedirectingSocketApi::recvfrom(int fd, void* buf, std::size_t len, int flags, sockaddr* addr,
                                       socklen_t* addrlen) {
    const ssize_t n = inner_.recvfrom(fd, buf, len, flags, addr, addrlen);
    if (n >= 0 && addr != nullptr && addrlen != nullptr) {
        if (auto orig = lookup(backward_, addr, *addrlen)) {
            const sockaddr_in sa = to_sockaddr(*orig);
            std::memcpy(addr, &sa, sizeof sa);
        }
    }
    return n;
}

int apply_socket_mark(SocketApi& api, int fd, const SocketMark& mark) {
    int rc = 0;
    switch (mark.kind) {
    case SocketMark::Kind::None:
        return 0;
    case SocketMark::Kind::Mark:
        rc = api.setsockopt(fd, SOL_SOCKET, SO_MARK, &mark.mark, sizeof mark.mark);
        break;
    case SocketMark::Kind::BindDevice:
        rc = api.setsockopt(fd, SOL_SOCKET, SO_BINDTODEVICE, mark.device.data(),
                            static_cast<socklen_t>(mark.device.size()));
        break;
    }
    return rc == 0 ? 0 : errno;
}

void set_nonblocking(int fd, bool on) {
    const int flags = ::fcntl(fd, F_GETFL, 0);
    if (flags < 0) throw errno_error("fcntl(F_GETFL)");
    const int next = on ? (flags | O_NONBLOCK) : (flags & ~O_NONBLOCK);
    if (next != flags && ::fcntl(fd, F_SETFL, next) < 0) throw errno_error("fcntl(F_SETFL)");
}

} // namespace flowlens
