// SPDX-License-Identifier: Apache-2.0

#include "flowlens/tcp_machine.hpp"

#include <algorithm>

namespace flowlens {

const char* to_string(TcpState s) {
    switch (s) {
    case TcpState::Listen: return "Listen";
    case TcpState::SynReceived: return "SynReceived";
    case TcpState::Established: return "Established";
    case TcpState::HalfClosedByApp: return "HalfClosedByApp";
    case TcpState::HalfClosedByServer: return "HalfClosedByServer";
    case TcpState::Closed: return "Closed";
    }
    return "?";
}

namespace {

// Serial-number comparison (RFC 1982 style) for 32-bit sequence numbers.
bool seq_before(std::uint32_t a, std::uint32_t b) { return static_cast<std::int32_t>(a - b) < 0; }

TcpFlags flags_ack() {
    TcpFlags f;
    f.ack = true;
    return f;
}

} // namespace

TcpSegment make_reset_for(const FlowKey& flow, const TcpSegment& seg) {
    TcpSegment rst;
    rst.src_port = flow.dst_port;
    rst.dst_port = flow.src_port;
    rst.flags.rst = true;
    if (seg.flags.ack) {
        rst.seq = seg.ack;
    } else {
        rst.seq = 0;
        rst.ack = seg.seq + seg.seq_length();
        rst.flags.ack = true;
    }
    return rst;
}

TcpRelay::TcpRelay(FlowKey flow, std::uint32_t initial_send_seq)
    : flow_(flow), iss_(initial_send_seq), snd_nxt_(initial_send_seq) {}

TcpSegment TcpRelay::segment(TcpFlags flags) const {
    TcpSegment s;
    s.src_port = flow_.dst_port;
    s.dst_port = flow_.src_port;
    s.seq = snd_nxt_;
    s.ack = rcv_nxt_;
    s.flags = flags;
    s.window = kRelayWindow;
    return s;
}

TcpSegment TcpRelay::ack_segment() const { return segment(flags_ack()); }

TcpSegment TcpRelay::syn_ack_segment() const {
    TcpFlags f = flags_ack();
    f.syn = true;
    TcpSegment s = segment(f);
    s.seq = iss_;
    s.mss = kRelayMss;
    return s;
}

void TcpRelay::maybe_close() {
    if (app_fin_received_ && fin_acked_) state_ = TcpState::Closed;
}

RelayActions TcpRelay::on_tunnel_segment(const TcpSegment& seg) {
    switch (state_) {
    case TcpState::Closed:
        return {};

    case TcpState::Listen:
        if (seg.flags.rst) {
            state_ = TcpState::Closed;
            return {DropFlow{}};
        }
        if (seg.flags.syn && !seg.flags.ack) {
            irs_ = seg.seq;
            rcv_nxt_ = seg.seq + 1;
            state_ = TcpState::SynReceived;
            return {OpenExternal{flow_.destination()}};
        }
        if (seg.is_pure_ack()) return {};
        state_ = TcpState::Closed;
        return {EmitToTunnel{make_reset_for(flow_, seg)}, DropFlow{}};

    case TcpState::SynReceived:
        if (seg.flags.rst) {
            pending_to_socket_.clear();
            state_ = TcpState::Closed;
            return {CloseExternal{}, DropFlow{}};
        }
        if (seg.flags.syn) {
            // Duplicate SYN: the external connect may still be running.
            if (syn_ack_sent_ && seg.seq == irs_) return {EmitToTunnel{syn_ack_segment()}};
            return {};
        }
        if (!syn_ack_sent_ || !seg.flags.ack || seg.ack != snd_nxt_) return {};
        // The app's handshake ACK; data or FIN may ride on it.
        state_ = TcpState::Established;
        return on_synchronized(seg);

    case TcpState::Established:
    case TcpState::HalfClosedByApp:
    case TcpState::HalfClosedByServer:
        return on_synchronized(seg);
    }
    return {};
}

RelayActions TcpRelay::on_synchronized(const TcpSegment& seg) {
    if (seg.flags.rst) {
        pending_to_socket_.clear();
        state_ = TcpState::Closed;
        return {CloseExternal{}, DropFlow{}};
    }
    if (seg.flags.syn) return {EmitToTunnel{ack_segment()}};
    if (!seg.flags.ack) return {};

    if (fin_sent_ && seg.ack == snd_nxt_) fin_acked_ = true;

    if (seg.payload.empty() && !seg.flags.fin) {
        maybe_close();
        return {};
    }
    if (app_fin_received_) return {EmitToTunnel{ack_segment()}};

    std::size_t skip = 0;
    if (seg.seq != rcv_nxt_) {
        if (!seq_before(seg.seq, rcv_nxt_)) return {EmitToTunnel{ack_segment()}}; // gap: duplicate ACK
        const std::uint32_t overlap = rcv_nxt_ - seg.seq;
        if (overlap >= seg.payload.size() + (seg.flags.fin ? 1u : 0u)) return {EmitToTunnel{ack_segment()}};
        skip = overlap;
    }

    RelayActions out;
    if (skip < seg.payload.size()) {
        Bytes fresh(seg.payload.begin() + static_cast<std::ptrdiff_t>(skip), seg.payload.end());
        rcv_nxt_ += static_cast<std::uint32_t>(fresh.size());
        pending_to_socket_.insert(pending_to_socket_.end(), fresh.begin(), fresh.end());
        out.push_back(WriteExternal{std::move(fresh)});
    }
    if (seg.flags.fin) {
        rcv_nxt_ += 1;
        app_fin_received_ = true;
        out.push_back(EmitToTunnel{ack_segment()});
        out.push_back(HalfCloseExternal{});
        if (state_ == TcpState::Established) state_ = TcpState::HalfClosedByApp;
        maybe_close();
    }
    return out;
}

RelayActions TcpRelay::external_connected(bool success) {
    if (state_ != TcpState::SynReceived || syn_ack_sent_) {
        throw TcpMachineError(TcpMachineError::Kind::InvalidState, "external_connected outside SynReceived");
    }
    if (!success) {
        state_ = TcpState::Closed;
        TcpSegment rst = segment(TcpFlags{});
        rst.seq = 0;
        rst.flags.rst = true;
        rst.flags.ack = true;
        rst.window = 0;
        return {EmitToTunnel{rst}, DropFlow{}};
    }
    syn_ack_sent_ = true;
    snd_nxt_ = iss_ + 1;
    return {EmitToTunnel{syn_ack_segment()}};
}

RelayActions TcpRelay::on_socket_data(ByteView bytes) {
    if (state_ == TcpState::Closed) throw TcpMachineError(TcpMachineError::Kind::FlowClosed, "flow closed");
    if (state_ != TcpState::Established && state_ != TcpState::HalfClosedByApp) {
        throw TcpMachineError(TcpMachineError::Kind::InvalidState, "socket data in a non-sending state");
    }
    RelayActions out;
    for (std::size_t off = 0; off < bytes.size(); off += kRelayMss) {
        const std::size_t n = std::min<std::size_t>(kRelayMss, bytes.size() - off);
        TcpFlags f = flags_ack();
        f.psh = off + n == bytes.size();
        TcpSegment s = segment(f);
        s.payload.assign(bytes.begin() + static_cast<std::ptrdiff_t>(off),
                         bytes.begin() + static_cast<std::ptrdiff_t>(off + n));
        snd_nxt_ += static_cast<std::uint32_t>(n);
        out.push_back(EmitToTunnel{std::move(s)});
    }
    return out;
}

RelayActions TcpRelay::on_socket_closed(bool reset) {
    if (state_ == TcpState::Closed) return {};
    if (reset || !handshake_complete()) {
        pending_to_socket_.clear();
        TcpFlags f = flags_ack();
        f.rst = true;
        TcpSegment rst = segment(f);
        rst.window = 0;
        state_ = TcpState::Closed;
        return {EmitToTunnel{rst}, DropFlow{}};
    }
    if (fin_sent_) return {};
    TcpFlags f = flags_ack();
    f.fin = true;
    TcpSegment fin = segment(f);
    snd_nxt_ += 1;
    fin_sent_ = true;
    if (state_ == TcpState::Established) state_ = TcpState::HalfClosedByServer;
    return {EmitToTunnel{fin}};
}

RelayActions TcpRelay::on_socket_wrote(std::size_t byte_count) {
    if (byte_count > pending_to_socket_.size()) {
        throw TcpMachineError(TcpMachineError::Kind::BadWriteCount, "wrote more than pending");
    }
    if (byte_count == 0) return {};
    pending_to_socket_.erase(pending_to_socket_.begin(),
                             pending_to_socket_.begin() + static_cast<std::ptrdiff_t>(byte_count));
    if (state_ == TcpState::Closed) return {};
    return {EmitToTunnel{ack_segment()}};
}

} // namespace flowlens
