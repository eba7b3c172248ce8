// SPDX-License-Identifier: Apache-2.0

#include "flowlens/sim.hpp"

#include <algorithm>

namespace flowlens {

namespace {

bool seq_lt(std::uint32_t a, std::uint32_t b) { return static_cast<std::int32_t>(a - b) < 0; }
bool seq_le(std::uint32_t a, std::uint32_t b) { return static_cast<std::int32_t>(a - b) <= 0; }

} // namespace

// ---- SimTcpConnection ----

SimTcpConnection::SimTcpConnection(SimHost& host, FlowKey key, std::uint32_t iss)
    : host_(host), key_(key), iss_(iss), snd_una_(iss), snd_nxt_(iss) {}

SimTcpConnection::Status SimTcpConnection::status() const {
    std::lock_guard lk(mu_);
    return status_;
}

void SimTcpConnection::transmit(TcpFlags flags, ByteView payload) {
    TcpSegment seg;
    seg.src_port = key_.src_port;
    seg.dst_port = key_.dst_port;
    seg.seq = snd_nxt_;
    seg.ack = flags.ack ? rcv_nxt_ : 0;
    seg.flags = flags;
    seg.window = 65535;
    if (flags.syn) seg.mss = mss_;
    seg.payload.assign(payload.begin(), payload.end());
    host_.write_raw(serialize_ipv4(make_tcp_packet(key_.src_addr, key_.dst_addr, seg)));
}

void SimTcpConnection::ack_now() {
    TcpFlags f;
    f.ack = true;
    transmit(f, {});
}

void SimTcpConnection::wake() { cv_.notify_all(); }

void SimTcpConnection::on_segment(const TcpSegment& seg) {
    std::lock_guard lk(mu_);
    ++segments_rx_;
    if (seg.flags.rst) {
        status_ = status_ == Status::Connecting ? Status::Refused : Status::Reset;
        wake();
        return;
    }
    if (status_ == Status::Connecting) {
        if (seg.flags.syn && seg.flags.ack && seg.ack == iss_ + 1) {
            rcv_nxt_ = seg.seq + 1;
            snd_una_ = seg.ack;
            peer_window_ = seg.window;
            if (seg.mss) mss_ = std::min(mss_, *seg.mss);
            status_ = Status::Open;
            ack_now();
            wake();
        }
        return;
    }
    if (status_ != Status::Open) return;

    if (seg.flags.ack) {
        if (seq_lt(snd_una_, seg.ack) && seq_le(seg.ack, snd_nxt_)) snd_una_ = seg.ack;
        peer_window_ = seg.window;
        if (fin_sent_ && seg.ack == snd_nxt_) fin_acked_ = true;
    }
    bool need_ack = false;
    if (!seg.payload.empty()) {
        if (seg.seq == rcv_nxt_) {
            rx_.insert(rx_.end(), seg.payload.begin(), seg.payload.end());
            rcv_nxt_ += static_cast<std::uint32_t>(seg.payload.size());
        }
        need_ack = true;
    }
    if (seg.flags.fin && seg.seq + seg.payload.size() == rcv_nxt_ && !peer_fin_) {
        peer_fin_ = true;
        rcv_nxt_ += 1;
        need_ack = true;
    }
    if (need_ack) ack_now();
    if (fin_sent_ && fin_acked_ && peer_fin_) status_ = Status::Closed;
    wake();
}

bool SimTcpConnection::wait_established(std::chrono::milliseconds timeout) {
    std::unique_lock lk(mu_);
    cv_.wait_for(lk, timeout, [&] { return status_ != Status::Connecting; });
    return status_ == Status::Open || status_ == Status::Closed;
}

bool SimTcpConnection::send(ByteView data, std::chrono::milliseconds timeout) {
    const auto deadline = std::chrono::steady_clock::now() + timeout;
    std::unique_lock lk(mu_);
    std::size_t off = 0;
    while (off < data.size()) {
        const bool ok = cv_.wait_until(lk, deadline, [&] {
            return status_ != Status::Open || snd_nxt_ - snd_una_ < peer_window_;
        });
        if (!ok || status_ != Status::Open || fin_sent_) return false;
        const std::size_t room = peer_window_ - (snd_nxt_ - snd_una_);
        const std::size_t n = std::min({static_cast<std::size_t>(mss_), data.size() - off, room});
        TcpFlags f;
        f.ack = true;
        f.psh = off + n == data.size();
        transmit(f, data.subspan(off, n));
        snd_nxt_ += static_cast<std::uint32_t>(n);
        off += n;
    }
    return true;
}

void SimTcpConnection::shutdown_write() {
    std::lock_guard lk(mu_);
    if (fin_sent_ || status_ != Status::Open) return;
    TcpFlags f;
    f.fin = true;
    f.ack = true;
    transmit(f, {});
    snd_nxt_ += 1;
    fin_sent_ = true;
}

void SimTcpConnection::reset() {
    std::lock_guard lk(mu_);
    if (status_ == Status::Reset || status_ == Status::Refused) return;
    TcpFlags f;
    f.rst = true;
    transmit(f, {});
    status_ = Status::Reset;
    wake();
}

std::size_t SimTcpConnection::wait_received(std::size_t n, std::chrono::milliseconds timeout) {
    std::unique_lock lk(mu_);
    cv_.wait_for(lk, timeout, [&] {
        return rx_.size() >= n || peer_fin_ || status_ == Status::Reset || status_ == Status::Refused;
    });
    return rx_.size();
}

bool SimTcpConnection::wait_peer_fin(std::chrono::milliseconds timeout) {
    std::unique_lock lk(mu_);
    cv_.wait_for(lk, timeout, [&] { return peer_fin_ || status_ == Status::Reset || status_ == Status::Refused; });
    return peer_fin_;
}

bool SimTcpConnection::wait_closed(std::chrono::milliseconds timeout) {
    std::unique_lock lk(mu_);
    cv_.wait_for(lk, timeout, [&] { return status_ != Status::Open && status_ != Status::Connecting; });
    return status_ == Status::Closed;
}

Bytes SimTcpConnection::received() const {
    std::lock_guard lk(mu_);
    return rx_;
}

std::size_t SimTcpConnection::received_size() const {
    std::lock_guard lk(mu_);
    return rx_.size();
}

std::uint64_t SimTcpConnection::segments_received() const {
    std::lock_guard lk(mu_);
    return segments_rx_;
}

// ---- SimUdpSocket ----

void SimUdpSocket::send_to(const Endpoint& dst, ByteView payload) {
    UdpDatagram d;
    d.src_port = local_.port;
    d.dst_port = dst.port;
    d.payload.assign(payload.begin(), payload.end());
    host_.write_raw(serialize_ipv4(make_udp_packet(local_.addr, dst.addr, d)));
}

std::optional<SimUdpSocket::Datagram> SimUdpSocket::recv(std::chrono::milliseconds timeout) {
    std::unique_lock lk(mu_);
    if (!cv_.wait_for(lk, timeout, [&] { return !inbox_.empty(); })) return std::nullopt;
    Datagram d = std::move(inbox_.front());
    inbox_.pop_front();
    return d;
}

void SimUdpSocket::deliver(Datagram d) {
    {
        std::lock_guard lk(mu_);
        inbox_.push_back(std::move(d));
    }
    cv_.notify_all();
}

// ---- SimHost ----

SimHost::SimHost(std::shared_ptr<TunnelEndpoint> app_side, Ipv4Addr address, std::int64_t uid)
    : link_(std::move(app_side)), address_(address), uid_(uid) {
    reader_ = std::thread([this] { reader_loop(); });
}

SimHost::~SimHost() { stop(); }

void SimHost::stop() {
    if (stopping_.exchange(true)) return;
    link_->inject_dummy();
    if (reader_.joinable()) reader_.join();
}

void SimHost::publish_sockets(MockProcSource* proc) {
    std::lock_guard lk(mu_);
    proc_ = proc;
}

std::uint16_t SimHost::allocate_port() {
    const std::uint16_t p = next_port_;
    next_port_ = next_port_ >= 60'000 ? 40'000 : static_cast<std::uint16_t>(next_port_ + 1);
    return p;
}

std::shared_ptr<SimTcpConnection> SimHost::open(const Endpoint& dst) {
    std::shared_ptr<SimTcpConnection> conn;
    {
        std::lock_guard lk(mu_);
        FlowKey key{ipproto::kTcp, address_, allocate_port(), dst.addr, dst.port};
        conn.reset(new SimTcpConnection(*this, key, next_iss_));
        next_iss_ += 0x0100'0000;
        tcp_[key] = conn;
        if (proc_) {
            proc_->add(SocketTable::Tcp,
                       {address_, key.src_port, dst.addr, dst.port, uid_, 100'000u + key.src_port});
        }
    }
    std::lock_guard lk(conn->mu_);
    TcpFlags f;
    f.syn = true;
    conn->transmit(f, {});
    conn->snd_nxt_ += 1;
    return conn;
}

std::shared_ptr<SimTcpConnection> SimHost::connect(const Endpoint& dst, std::chrono::milliseconds timeout) {
    auto c = open(dst);
    if (!c->wait_established(timeout)) return nullptr;
    return c;
}

std::shared_ptr<SimUdpSocket> SimHost::udp() {
    std::lock_guard lk(mu_);
    const Endpoint local{address_, allocate_port()};
    std::shared_ptr<SimUdpSocket> s(new SimUdpSocket(*this, local));
    udp_[local.port] = s;
    if (proc_) proc_->add(SocketTable::Udp, {address_, local.port, Ipv4Addr(), 0, uid_, 200'000u + local.port});
    return s;
}

void SimHost::write_raw(ByteView packet) {
    try {
        link_->write_packet(packet);
    } catch (const EndpointClosed&) {
    }
}

void SimHost::reader_loop() {
    while (true) {
        auto raw = link_->read_packet();
        if (!raw) return;
        if (is_shutdown_dummy(*raw)) {
            if (stopping_) return;
            continue;
        }
        ++packets_in_;
        IpPacket ip;
        try {
            ip = parse_ipv4(*raw);
        } catch (const CodecException&) {
            ++unmatched_in_;
            continue;
        }
        try {
            if (ip.protocol == ipproto::kTcp) {
                const TcpSegment seg = parse_tcp(ip);
                const FlowKey key{ipproto::kTcp, ip.dst, seg.dst_port, ip.src, seg.src_port};
                std::shared_ptr<SimTcpConnection> c;
                {
                    std::lock_guard lk(mu_);
                    if (auto it = tcp_.find(key); it != tcp_.end()) c = it->second.lock();
                }
                if (c) {
                    c->on_segment(seg);
                } else {
                    ++unmatched_in_;
                }
            } else if (ip.protocol == ipproto::kUdp) {
                UdpDatagram d = parse_udp(ip);
                std::shared_ptr<SimUdpSocket> s;
                {
                    std::lock_guard lk(mu_);
                    if (auto it = udp_.find(d.dst_port); it != udp_.end()) s = it->second.lock();
                }
                if (s) {
                    s->deliver({Endpoint{ip.src, d.src_port}, std::move(d.payload)});
                } else {
                    ++unmatched_in_;
                }
            } else {
                ++unmatched_in_;
            }
        } catch (const CodecException&) {
            ++unmatched_in_;
        }
    }
}

} // namespace flowlens
