// SPDX-License-Identifier: Apache-2.0
//
// Thin seams over the OS: file descriptors, clocks and the socket calls the
// relay makes. Tests swap in decorators (delays, redirection, call tracing).

#pragma once

#include <netinet/in.h>
#include <sys/socket.h>
#include <sys/types.h>

#include <chrono>
#include <cstdint>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <system_error>

#include "flowlens/packet.hpp"

namespace flowlens {

class UniqueFd {
public:
    UniqueFd() = default;
    explicit UniqueFd(int fd) : fd_(fd) {}
    UniqueFd(const UniqueFd&) = delete;
    UniqueFd& operator=(const UniqueFd&) = delete;
    UniqueFd(UniqueFd&& o) noexcept : fd_(o.release()) {}
    UniqueFd& operator=(UniqueFd&& o) noexcept {
        if (this != &o) reset(o.release());
        return *this;
    }
    ~UniqueFd() { reset(); }

    int get() const { return fd_; }
    explicit operator bool() const { return fd_ >= 0; }
    int release() {
        const int fd = fd_;
        fd_ = -1;
        return fd;
    }
    void reset(int fd = -1);

private:
    int fd_ = -1;
};

std::system_error errno_error(const char* what);
std::system_error errno_error(const char* what, int err);

// Monotonic nanosecond clock.
class Clock {
public:
    virtual ~Clock() = default;
    virtual std::int64_t now_ns() const = 0;
};

class SteadyClock final : public Clock {
public:
    std::int64_t now_ns() const override;
};

const Clock& steady_clock();

// Sleeps until the steady clock reads `deadline_ns`.
void sleep_until_ns(std::int64_t deadline_ns);

// Wall-clock microseconds since the epoch, never decreasing within a process.
std::int64_t monotonic_wall_us();

sockaddr_in to_sockaddr(const Endpoint& ep);
Endpoint from_sockaddr(const sockaddr_in& sa);

// The subset of the BSD socket API the relay uses. Every method mirrors the
// libc call of the same name, including the -1/errno convention.
class SocketApi {
public:
    virtual ~SocketApi() = default;
    virtual int socket(int domain, int type, int protocol) = 0;
    virtual int connect(int fd, const sockaddr* addr, socklen_t len) = 0;
    virtual ssize_t sendto(int fd, const void* buf, std::size_t len, int flags, const sockaddr* addr,
                           socklen_t addrlen) = 0;
    virtual ssize_t recvfrom(int fd, void* buf, std::size_t len, int flags, sockaddr* addr, socklen_t* addrlen) = 0;
    virtual int setsockopt(int fd, int level, int name, const void* value, socklen_t len) = 0;
};

class PosixSocketApi final : public SocketApi {
public:
    int socket(int domain, int type, int protocol) override;
    int connect(int fd, const sockaddr* addr, socklen_t len) override;
    ssize_t sendto(int fd, const void* buf, std::size_t len, int flags, const sockaddr* addr,
                   socklen_t addrlen) override;
    ssize_t recvfrom(int fd, void* buf, std::size_t len, int flags, sockaddr* addr, socklen_t* addrlen) override;
    int setsockopt(int fd, int level, int name, const void* value, socklen_t len) override;
};

PosixSocketApi& posix_sockets();

// Forwards everything to an inner API; subclasses override what they change.
class ForwardingSocketApi : public SocketApi {
public:
    explicit ForwardingSocketApi(SocketApi& inner) : inner_(inner) {}
    int socket(int domain, int type, int protocol) override { return inner_.socket(domain, type, protocol); }
    int connect(int fd, const sockaddr* addr, socklen_t len) override { return inner_.connect(fd, addr, len); }
    ssize_t sendto(int fd, const void* buf, std::size_t len, int flags, const sockaddr* addr,
                   socklen_t addrlen) override {
        return inner_.sendto(fd, buf, len, flags, addr, addrlen);
    }
    ssize_t recvfrom(int fd, void* buf, std::size_t len, int flags, sockaddr* addr, socklen_t* addrlen) override {
        return inner_.recvfrom(fd, buf, len, flags, addr, addrlen);
    }
    int setsockopt(int fd, int level, int name, const void* value, socklen_t len) override {
        return inner_.setsockopt(fd, level, name, value, len);
    }

protected:
    SocketApi& inner_;
};

// Holds every connect() for a fixed delay before the real call, which makes
// the handshake look `delay` slower to a caller timing the call.
class DelayingSocketApi final : public ForwardingSocketApi {
public:
    DelayingSocketApi(SocketApi& inner, std::chrono::microseconds delay) : ForwardingSocketApi(inner), delay_(delay) {}
    int connect(int fd, const sockaddr* addr, socklen_t len) override;

private:
    std::chrono::microseconds delay_;
};

// Rewrites IPv4 destinations of connect() and sendto() through a table, and
// maps the source of received datagrams back, so the caller keeps seeing the
// original addresses. Used to point replayed flows at local responders.
class RedirectingSocketApi final : public ForwardingSocketApi {
public:
    explicit RedirectingSocketApi(SocketApi& inner) : ForwardingSocketApi(inner) {}
    void add(const Endpoint& from, const Endpoint& to);

    int connect(int fd, const sockaddr* addr, socklen_t len) override;
    ssize_t sendto(int fd, const void* buf, std::size_t len, int flags, const sockaddr* addr,
                   socklen_t addrlen) override;
    ssize_t recvfrom(int fd, void* buf, std::size_t len, int flags, sockaddr* addr, socklen_t* addrlen) override;

private:
    std::optional<Endpoint> lookup(const std::map<Endpoint, Endpoint>& table, const sockaddr* addr,
                                   socklen_t len) const;

    mutable std::mutex mu_;
    std::map<Endpoint, Endpoint> forward_;
    std::map<Endpoint, Endpoint> backward_;
};

// How relay sockets are kept off the tunnel route.
struct SocketMark {
    enum class Kind { None, Mark, BindDevice };
    Kind kind = Kind::None;
    std::uint32_t mark = 0;
    std::string device;

    static SocketMark none() { return {}; }
    static SocketMark fwmark(std::uint32_t value) { return {Kind::Mark, value, {}}; }
    static SocketMark bind_device(std::string name) { return {Kind::BindDevice, 0, std::move(name)}; }
};

// Returns 0 or an errno value.
int apply_socket_mark(SocketApi& api, int fd, const SocketMark& mark);

void set_nonblocking(int fd, bool on);

} // namespace flowlens
