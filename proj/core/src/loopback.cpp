// SPDX-License-Identifier: Apache-2.0

#include "flowlens/loopback.hpp"

#include <poll.h>
#include <sys/eventfd.h>
#include <unistd.h>

#include <cerrno>

namespace flowlens {

namespace {

UniqueFd bind_loopback(int type, Endpoint& bound) {
    UniqueFd fd(::socket(AF_INET, type | SOCK_CLOEXEC, 0));
    if (!fd) throw errno_error("socket");
    const int one = 1;
    ::setsockopt(fd.get(), SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
    sockaddr_in sa = to_sockaddr({Ipv4Addr(127, 0, 0, 1), 0});
    if (::bind(fd.get(), reinterpret_cast<sockaddr*>(&sa), sizeof sa) != 0) throw errno_error("bind");
    socklen_t len = sizeof sa;
    ::getsockname(fd.get(), reinterpret_cast<sockaddr*>(&sa), &len);
    bound = from_sockaddr(sa);
    return fd;
}

// Waits for `fd` to become readable or `stop_fd` to fire; false on stop.
bool wait_readable(int fd, int stop_fd) {
    pollfd p[2] = {{fd, POLLIN, 0}, {stop_fd, POLLIN, 0}};
    while (true) {
        const int rc = ::poll(p, 2, -1);
        if (rc < 0 && errno == EINTR) continue;
        if (rc < 0) return false;
        if (p[1].revents) return false;
        return true;
    }
}

} // namespace

// ---- TCP echo ----

TcpEchoServer::TcpEchoServer() : TcpEchoServer(Options{}) {}

TcpEchoServer::TcpEchoServer(Options options) : options_(options) {
    listener_ = bind_loopback(SOCK_STREAM, endpoint_);
    if (::listen(listener_.get(), 512) != 0) throw errno_error("listen");
    stop_fd_.reset(::eventfd(0, EFD_CLOEXEC));
    acceptor_ = std::thread([this] { accept_loop(); });
}

TcpEchoServer::~TcpEchoServer() { stop(); }

void TcpEchoServer::stop() {
    if (stopping_.exchange(true)) return;
    const std::uint64_t one = 1;
    [[maybe_unused]] auto rc = ::write(stop_fd_.get(), &one, sizeof one);
    if (acceptor_.joinable()) acceptor_.join();
    std::lock_guard lk(mu_);
    for (auto& t : sessions_) t.join();
    sessions_.clear();
}

void TcpEchoServer::accept_loop() {
    while (wait_readable(listener_.get(), stop_fd_.get())) {
        const int fd = ::accept4(listener_.get(), nullptr, nullptr, SOCK_CLOEXEC);
        if (fd < 0) continue;
        ++accepted_;
        if (options_.rcvbuf > 0) ::setsockopt(fd, SOL_SOCKET, SO_RCVBUF, &options_.rcvbuf, sizeof options_.rcvbuf);
        std::lock_guard lk(mu_);
        sessions_.emplace_back([this, fd] { serve(fd); });
    }
}

void TcpEchoServer::serve(int raw) {
    UniqueFd fd(raw);
    Bytes buf(options_.max_read);
    while (wait_readable(fd.get(), stop_fd_.get())) {
        const ssize_t n = ::recv(fd.get(), buf.data(), buf.size(), 0);
        if (n < 0 && errno == EINTR) continue;
        if (n <= 0) break;
        std::size_t off = 0;
        while (off < static_cast<std::size_t>(n)) {
            const ssize_t w = ::send(fd.get(), buf.data() + off, static_cast<std::size_t>(n) - off, MSG_NOSIGNAL);
            if (w < 0 && errno == EINTR) continue;
            if (w <= 0) return;
            off += static_cast<std::size_t>(w);
        }
        echoed_ += static_cast<std::uint64_t>(n);
        if (options_.read_pause.count() > 0) std::this_thread::sleep_for(options_.read_pause);
    }
    ::shutdown(fd.get(), SHUT_WR);
    // Let the peer see the FIN before the descriptor goes away.
    wait_readable(fd.get(), stop_fd_.get());
}

// ---- UDP echo ----

UdpEchoServer::UdpEchoServer() {
    sock_ = bind_loopback(SOCK_DGRAM, endpoint_);
    worker_ = std::thread([this] {
        Bytes buf(65535);
        while (!stopping_) {
            sockaddr_in from{};
            socklen_t len = sizeof from;
            const ssize_t n = ::recvfrom(sock_.get(), buf.data(), buf.size(), 0, reinterpret_cast<sockaddr*>(&from), &len);
            if (n < 0 && errno == EINTR) continue;
            if (n <= 0 || stopping_) break;
            ++datagrams_;
            ::sendto(sock_.get(), buf.data(), static_cast<std::size_t>(n), 0, reinterpret_cast<sockaddr*>(&from), len);
        }
    });
}

UdpEchoServer::~UdpEchoServer() { stop(); }

void UdpEchoServer::stop() {
    if (stopping_.exchange(true)) return;
    ::shutdown(sock_.get(), SHUT_RDWR);
    if (worker_.joinable()) worker_.join();
}

// ---- DNS ----

Bytes build_dns_reply(ByteView query, Ipv4Addr answer, std::optional<std::uint16_t> txn_override) {
    Bytes out;
    if (query.size() < kDnsHeader) return out;
    std::size_t q_end = kDnsHeader;
    while (q_end < query.size() && query[q_end] != 0) q_end += 1 + query[q_end];
    q_end += 1 + 4;
    const bool has_question = q_end <= query.size();
    out.assign(query.begin(), query.begin() + static_cast<std::ptrdiff_t>(has_question ? q_end : kDnsHeader));
    if (txn_override) {
        out[0] = static_cast<std::uint8_t>(*txn_override >> 8);
        out[1] = static_cast<std::uint8_t>(*txn_override);
    }
    out[2] = 0x81; // QR, RD
    out[3] = 0x80; // RA
    out[4] = 0;
    out[5] = has_question ? 1 : 0;
    out[6] = 0;
    out[7] = has_question ? 1 : 0;
    for (int i = 8; i < 12; ++i) out[static_cast<std::size_t>(i)] = 0;
    if (has_question) {
        const std::uint8_t rr[] = {0xC0, 0x0C, 0x00, 0x01, 0x00, 0x01, 0x00, 0x00, 0x00, 0x3C, 0x00, 0x04};
        out.insert(out.end(), std::begin(rr), std::end(rr));
        for (int shift = 24; shift >= 0; shift -= 8) out.push_back(static_cast<std::uint8_t>(answer.value >> shift));
    }
    return out;
}

DnsResponder::DnsResponder(Options options) : options_(options) {
    sock_ = bind_loopback(SOCK_DGRAM, endpoint_);
    worker_ = std::thread([this] {
        Bytes buf(65535);
        const Clock& clock = steady_clock();
        while (!stopping_) {
            sockaddr_in from{};
            socklen_t len = sizeof from;
            const ssize_t n = ::recvfrom(sock_.get(), buf.data(), buf.size(), 0, reinterpret_cast<sockaddr*>(&from), &len);
            const std::int64_t arrived = clock.now_ns();
            if (n < 0 && errno == EINTR) continue;
            if (n <= 0 || stopping_) break;
            ++queries_;
            if (options_.silent || static_cast<std::size_t>(n) < kDnsHeader) continue;
            const ByteView q(buf.data(), static_cast<std::size_t>(n));
            const std::int64_t delay_ns = std::chrono::nanoseconds(options_.delay).count();
            if (options_.wrong_txn_first) {
                sleep_until_ns(arrived + static_cast<std::int64_t>(static_cast<double>(delay_ns) * options_.wrong_at_fraction));
                const std::uint16_t wrong = static_cast<std::uint16_t>(load_be16(q, 0) ^ 0xFFFF);
                const Bytes r = build_dns_reply(q, Ipv4Addr(127, 0, 0, 1), wrong);
                ::sendto(sock_.get(), r.data(), r.size(), 0, reinterpret_cast<sockaddr*>(&from), len);
            }
            sleep_until_ns(arrived + delay_ns);
            const Bytes r = build_dns_reply(q, Ipv4Addr(127, 0, 0, 1));
            ::sendto(sock_.get(), r.data(), r.size(), 0, reinterpret_cast<sockaddr*>(&from), len);
        }
    });
}

DnsResponder::~DnsResponder() { stop(); }

void DnsResponder::stop() {
    if (stopping_.exchange(true)) return;
    ::shutdown(sock_.get(), SHUT_RDWR);
    if (worker_.joinable()) worker_.join();
}

std::uint16_t unused_tcp_port() {
    Endpoint ep;
    UniqueFd fd = bind_loopback(SOCK_STREAM, ep);
    return ep.port;
}

} // namespace flowlens
