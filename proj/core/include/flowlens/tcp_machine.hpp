// SPDX-License-Identifier: Apache-2.0
//
// User-space TCP endpoint that terminates the app's connection on the tunnel
// side. Each call consumes one event and returns the ordered list of side
// effects the engine has to carry out; the machine itself performs no I/O.
//
// Tuning follows the relay's needs rather than a general-purpose stack: a
// fixed MSS of 1460 and window of 65535, no congestion or flow control
// towards the app, no retransmission timers, and pure ACKs from the app are
// absorbed without any output.

#pragma once

#include <cstdint>
#include <stdexcept>
#include <variant>
#include <vector>

#include "flowlens/packet.hpp"

namespace flowlens {

inline constexpr std::uint16_t kRelayMss = 1460;
inline constexpr std::uint16_t kRelayWindow = 65535;

enum class TcpState { Listen, SynReceived, Established, HalfClosedByApp, HalfClosedByServer, Closed };

const char* to_string(TcpState s);

struct EmitToTunnel {
    TcpSegment segment;
    bool operator==(const EmitToTunnel&) const = default;
};
struct OpenExternal {
    Endpoint destination;
    bool operator==(const OpenExternal&) const = default;
};
struct WriteExternal {
    Bytes data;
    bool operator==(const WriteExternal&) const = default;
};
struct HalfCloseExternal {
    bool operator==(const HalfCloseExternal&) const = default;
};
struct CloseExternal {
    bool operator==(const CloseExternal&) const = default;
};
struct DropFlow {
    bool operator==(const DropFlow&) const = default;
};

using RelayAction = std::variant<EmitToTunnel, OpenExternal, WriteExternal, HalfCloseExternal, CloseExternal, DropFlow>;
using RelayActions = std::vector<RelayAction>;

class TcpMachineError : public std::logic_error {
public:
    enum class Kind { FlowClosed, InvalidState, BadWriteCount };
    TcpMachineError(Kind kind, const char* what) : std::logic_error(what), kind_(kind) {}
    Kind kind() const noexcept { return kind_; }

private:
    Kind kind_;
};

// Opaque handle of the spliced external connection; 0 means none.
struct ClientRef {
    std::uint64_t id = 0;
    bool operator==(const ClientRef&) const = default;
};

// RST answering `seg` on a connection that does not exist (RFC 793 reset
// generation). `flow` is the app->server key of the offending segment.
TcpSegment make_reset_for(const FlowKey& flow, const TcpSegment& seg);

class TcpRelay {
public:
    // `initial_send_seq` is the relay's ISN for this flow; callers draw it
    // from a per-engine random source.
    TcpRelay(FlowKey flow, std::uint32_t initial_send_seq);

    RelayActions on_tunnel_segment(const TcpSegment& seg);
    RelayActions external_connected(bool success);
    RelayActions on_socket_data(ByteView bytes);
    RelayActions on_socket_closed(bool reset);
    RelayActions on_socket_wrote(std::size_t byte_count);

    const FlowKey& flow() const { return flow_; }
    TcpState state() const { return state_; }
    std::uint32_t snd_nxt() const { return snd_nxt_; }
    std::uint32_t rcv_nxt() const { return rcv_nxt_; }
    std::uint16_t mss() const { return kRelayMss; }
    std::uint16_t advertised_window() const { return kRelayWindow; }
    const Bytes& pending_to_socket() const { return pending_to_socket_; }
    bool handshake_complete() const { return state_ != TcpState::Listen && state_ != TcpState::SynReceived; }
    bool app_fin_received() const { return app_fin_received_; }
    bool fin_sent() const { return fin_sent_; }

    ClientRef client_ref() const { return client_; }
    void set_client_ref(ClientRef ref) { client_ = ref; }

    bool operator==(const TcpRelay&) const = default;

private:
    TcpSegment segment(TcpFlags flags) const;
    TcpSegment ack_segment() const;
    TcpSegment syn_ack_segment() const;
    RelayActions on_synchronized(const TcpSegment& seg);
    void maybe_close();

    FlowKey flow_;
    TcpState state_ = TcpState::Listen;
    std::uint32_t iss_;
    std::uint32_t irs_ = 0;
    std::uint32_t snd_nxt_;
    std::uint32_t rcv_nxt_ = 0;
    Bytes pending_to_socket_;
    bool syn_ack_sent_ = false;
    bool fin_sent_ = false;
    bool fin_acked_ = false;
    bool app_fin_received_ = false;
    ClientRef client_;
};

} // namespace flowlens
