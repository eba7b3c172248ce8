// SPDX-License-Identifier: Apache-2.0
//
// Small servers on 127.0.0.1 used as relay destinations by the self-test,
// the replayer, the benchmarks and the test suite.

#pragma once

#include <atomic>
#include <chrono>
#include <cstdint>
#include <list>
#include <mutex>
#include <optional>
#include <string>
#include <thread>

#include "flowlens/packet.hpp"
#include "flowlens/sys.hpp"

namespace flowlens {

class TcpEchoServer {
public:
    struct Options {
        // Throttling, for partial-write tests: each recv takes at most
        // `max_read` bytes and is followed by `read_pause`.
        std::size_t max_read = 64 * 1024;
        std::chrono::microseconds read_pause{0};
        int rcvbuf = 0; // SO_RCVBUF on accepted sockets; 0 keeps the default
    };

    TcpEchoServer();
    explicit TcpEchoServer(Options options);
    ~TcpEchoServer();
    TcpEchoServer(const TcpEchoServer&) = delete;
    TcpEchoServer& operator=(const TcpEchoServer&) = delete;

    Endpoint endpoint() const { return endpoint_; }
    std::uint64_t accepted() const { return accepted_.load(); }
    std::uint64_t bytes_echoed() const { return echoed_.load(); }
    void stop();

private:
    void accept_loop();
    void serve(int fd);

    Options options_;
    UniqueFd listener_;
    UniqueFd stop_fd_;
    Endpoint endpoint_;
    std::atomic<bool> stopping_{false};
    std::atomic<std::uint64_t> accepted_{0};
    std::atomic<std::uint64_t> echoed_{0};
    std::thread acceptor_;
    std::mutex mu_;
    std::list<std::thread> sessions_;
};

class UdpEchoServer {
public:
    UdpEchoServer();
    ~UdpEchoServer();
    Endpoint endpoint() const { return endpoint_; }
    std::uint64_t datagrams() const { return datagrams_.load(); }
    void stop();

private:
    UniqueFd sock_;
    Endpoint endpoint_;
    std::atomic<bool> stopping_{false};
    std::atomic<std::uint64_t> datagrams_{0};
    std::thread worker_;
};

// Answers A queries with 127.0.0.1 after a fixed delay, measured from the
// query's arrival. Optionally sends a reply with a wrong transaction id
// first, at a fraction of the delay.
class DnsResponder {
public:
    struct Options {
        std::chrono::microseconds delay{0};
        bool wrong_txn_first = false;
        double wrong_at_fraction = 0.3;
        bool silent = false; // never answer
    };

    explicit DnsResponder(Options options);
    ~DnsResponder();
    Endpoint endpoint() const { return endpoint_; }
    std::uint64_t queries() const { return queries_.load(); }
    void stop();

private:
    Options options_;
    UniqueFd sock_;
    Endpoint endpoint_;
    std::atomic<bool> stopping_{false};
    std::atomic<std::uint64_t> queries_{0};
    std::thread worker_;
};

// Reply to `query`: same id and question, one A record.
Bytes build_dns_reply(ByteView query, Ipv4Addr answer, std::optional<std::uint16_t> txn_override = {});

// A loopback TCP port with no listener (bound briefly, then released).
std::uint16_t unused_tcp_port();

} // namespace flowlens
