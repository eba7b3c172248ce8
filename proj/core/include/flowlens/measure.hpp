// SPDX-License-Identifier: Apache-2.0
//
// RTT primitives. A TCP sample is the duration of one blocking connect()
// (SYN out, SYN/ACK in); a DNS sample spans send() to the receive of the
// reply carrying the query's transaction id.

#pragma once

#include <chrono>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>

#include "flowlens/appmap.hpp"
#include "flowlens/packet.hpp"
#include "flowlens/sys.hpp"

namespace flowlens {

enum class MeasureKind { TcpConnect, Dns };
enum class Outcome { Success, Refused, Timeout, Unreachable };
enum class NetworkType { Wifi, Cellular2G, Cellular3G, CellularLTE, Wired, Unknown };

const char* to_string(MeasureKind k);
const char* to_string(Outcome o);
const char* to_string(NetworkType t);
std::optional<MeasureKind> parse_measure_kind(std::string_view s);
std::optional<Outcome> parse_outcome(std::string_view s);
std::optional<NetworkType> parse_network_type(std::string_view s);

struct Timing {
    Outcome outcome = Outcome::Timeout;
    std::optional<std::int64_t> rtt_us; // set iff outcome == Success
};

struct ConnectResult {
    Timing timing;
    UniqueFd fd;   // the socket (connected on success); closing is left to the caller
    int error = 0; // errno of the failed connect
};

// Blocking connect with a send timeout. The two clock reads sit directly
// around the connect call.
ConnectResult timed_connect(SocketApi& api, const Clock& clock, const Endpoint& dst, std::chrono::milliseconds timeout,
                            const SocketMark& mark = {}, const std::function<void(int)>& on_socket = {});

struct DnsResult {
    Timing timing;
    Bytes reply;                 // the matching reply, if any
    std::uint32_t unmatched = 0; // replies skipped for a wrong txn id
    int error = 0;
    UniqueFd fd; // the query socket; closing is left to the caller
};

// Sends `query` to `resolver` and waits for a reply with the same txn id.
// Replies with other ids are passed to `on_unmatched` and the clock keeps
// running.
DnsResult timed_dns(SocketApi& api, const Clock& clock, ByteView query, const Endpoint& resolver,
                    std::chrono::milliseconds timeout, const std::function<void(ByteView)>& on_unmatched = {},
                    const std::function<void(int)>& on_socket = {});

// Hex SHA-1 of salt || device id.
std::string device_id_digest(std::string_view device_id, ByteView salt);

struct RecordContext {
    NetworkType network_type = NetworkType::Unknown;
    std::string network_label;
    std::string session_id;
    std::string device_id_hash;
};

class NetworkProbe {
public:
    virtual ~NetworkProbe() = default;
    virtual NetworkType type() = 0;
    virtual std::string label() = 0;
};

class StaticNetworkProbe final : public NetworkProbe {
public:
    StaticNetworkProbe(NetworkType type = NetworkType::Wired, std::string label = {})
        : type_(type), label_(std::move(label)) {}
    NetworkType type() override { return type_; }
    std::string label() override { return label_; }

private:
    NetworkType type_;
    std::string label_;
};

struct MeasurementRecord {
    MeasureKind kind = MeasureKind::TcpConnect;
    AppIdentity app;
    FlowKey flow;
    std::string domain;
    std::optional<std::int64_t> rtt_us;
    Outcome outcome = Outcome::Success;
    NetworkType network_type = NetworkType::Unknown;
    std::string network_label;
    std::int64_t taken_at = 0; // wall clock, microseconds
    std::string session_id;
    std::string device_id_hash;

    bool operator==(const MeasurementRecord&) const = default;
};

MeasurementRecord make_record(MeasureKind kind, const AppIdentity& app, const FlowKey& flow, const Timing& timing,
                              const RecordContext& context, std::string domain = {});

} // namespace flowlens
