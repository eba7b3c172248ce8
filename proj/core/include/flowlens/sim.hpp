// SPDX-License-Identifier: Apache-2.0
//
// A minimal app-side TCP/UDP host that speaks through the app end of an
// in-memory tunnel. It assumes a lossless, in-order link (which the
// in-memory tunnel is): no retransmission, no reassembly.

#pragma once

#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <thread>

#include "flowlens/appmap.hpp"
#include "flowlens/packet.hpp"
#include "flowlens/tunnel.hpp"

namespace flowlens {

class SimHost;

class SimTcpConnection {
public:
    enum class Status { Connecting, Open, Refused, Reset, Closed };

    const FlowKey& key() const { return key_; }
    Status status() const;

    // False on timeout, RST or refusal.
    bool wait_established(std::chrono::milliseconds timeout);

    // Queues `data` as segments of at most `mss` bytes, waiting for window
    // space as needed. Returns false if the connection failed or the wait
    // exceeded `timeout`.
    bool send(ByteView data, std::chrono::milliseconds timeout = std::chrono::seconds(30));
    void shutdown_write();
    void reset();

    // Blocks until `n` bytes arrived (or FIN/RST/timeout); returns the
    // byte count received so far.
    std::size_t wait_received(std::size_t n, std::chrono::milliseconds timeout);
    // Blocks until the peer's FIN (or RST/timeout); true on FIN.
    bool wait_peer_fin(std::chrono::milliseconds timeout);
    // Both FINs exchanged and acknowledged.
    bool wait_closed(std::chrono::milliseconds timeout);

    Bytes received() const;
    std::size_t received_size() const;
    std::uint64_t segments_received() const;

private:
    friend class SimHost;
    SimTcpConnection(SimHost& host, FlowKey key, std::uint32_t iss);

    void on_segment(const TcpSegment& seg);
    void transmit(TcpFlags flags, ByteView payload);
    void ack_now();
    void wake();

    SimHost& host_;
    FlowKey key_;
    std::uint16_t mss_ = 1460;

    mutable std::mutex mu_;
    std::condition_variable cv_;
    Status status_ = Status::Connecting;
    std::uint32_t iss_;
    std::uint32_t snd_una_;
    std::uint32_t snd_nxt_;
    std::uint32_t rcv_nxt_ = 0;
    std::uint32_t peer_window_ = 0;
    bool fin_sent_ = false;
    bool fin_acked_ = false;
    bool peer_fin_ = false;
    Bytes rx_;
    std::uint64_t segments_rx_ = 0;
};

class SimUdpSocket {
public:
    struct Datagram {
        Endpoint from;
        Bytes payload;
    };

    std::uint16_t local_port() const { return local_.port; }
    void send_to(const Endpoint& dst, ByteView payload);
    std::optional<Datagram> recv(std::chrono::milliseconds timeout);

private:
    friend class SimHost;
    SimUdpSocket(SimHost& host, Endpoint local) : host_(host), local_(local) {}
    void deliver(Datagram d);

    SimHost& host_;
    Endpoint local_;
    std::mutex mu_;
    std::condition_variable cv_;
    std::deque<Datagram> inbox_;
};

class SimHost {
public:
    // `uid` is what published socket-table rows carry.
    explicit SimHost(std::shared_ptr<TunnelEndpoint> app_side, Ipv4Addr address = Ipv4Addr(10, 0, 0, 2),
                     std::int64_t uid = 10'001);
    ~SimHost();
    SimHost(const SimHost&) = delete;
    SimHost& operator=(const SimHost&) = delete;

    // Every socket opened afterwards is listed in `proc`.
    void publish_sockets(MockProcSource* proc);

    // Sends a SYN and returns right away; use wait_established().
    std::shared_ptr<SimTcpConnection> open(const Endpoint& dst);
    // open() + wait_established(); null on failure.
    std::shared_ptr<SimTcpConnection> connect(const Endpoint& dst,
                                             std::chrono::milliseconds timeout = std::chrono::seconds(15));
    std::shared_ptr<SimUdpSocket> udp();

    void write_raw(ByteView packet);
    void stop();

    Ipv4Addr address() const { return address_; }
    std::uint64_t packets_in() const { return packets_in_.load(); }
    std::uint64_t unmatched_in() const { return unmatched_in_.load(); }

private:
    friend class SimTcpConnection;
    friend class SimUdpSocket;

    std::uint16_t allocate_port();
    void reader_loop();

    std::shared_ptr<TunnelEndpoint> link_;
    Ipv4Addr address_;
    std::int64_t uid_;
    MockProcSource* proc_ = nullptr;

    std::mutex mu_;
    std::map<FlowKey, std::weak_ptr<SimTcpConnection>> tcp_;
    std::map<std::uint16_t, std::weak_ptr<SimUdpSocket>> udp_;
    std::uint16_t next_port_ = 40'000;
    std::uint32_t next_iss_ = 0x1000;

    std::atomic<bool> stopping_{false};
    std::atomic<std::uint64_t> packets_in_{0};
    std::atomic<std::uint64_t> unmatched_in_{0};
    std::thread reader_;
};

} // namespace flowlens
