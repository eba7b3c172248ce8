// SPDX-License-Identifier: Apache-2.0
//
// Replay traces: app-side packets with timestamps, plus a header that says
// how each destination should behave. Layout:
//
//   "FLTRACE1"                      8-byte magic
//   u32 header_length (BE)          followed by that many bytes of text
//   frames until EOF:
//     u64 offset_us (BE), u32 length (BE), `length` raw IPv4 bytes
//
// Header lines (blank lines and '#' comments ignored):
//   listen <addr:port>                       echo server
//   refuse <addr:port>                       nothing listening
//   dns <addr:port> [delay_ms=N] [wrong_txn_first] [silent]

#pragma once

#include <chrono>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "flowlens/bytes.hpp"
#include "flowlens/packet.hpp"
#include "flowlens/relay_engine.hpp"
#include "flowlens/store.hpp"

namespace flowlens {

inline constexpr char kTraceMagic[8] = {'F', 'L', 'T', 'R', 'A', 'C', 'E', '1'};

class TraceError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct ResponderSpec {
    enum class Kind { Listen, Refuse, Dns };
    Kind kind = Kind::Listen;
    Endpoint at;
    std::chrono::milliseconds delay{0};
    bool wrong_txn_first = false;
    bool silent = false;

    bool operator==(const ResponderSpec&) const = default;
};

struct TraceFrame {
    std::uint64_t offset_us = 0;
    Bytes packet;
    bool operator==(const TraceFrame&) const = default;
};

struct Trace {
    std::vector<ResponderSpec> responders;
    std::vector<TraceFrame> frames;
    bool operator==(const Trace&) const = default;
};

std::string format_trace_header(const std::vector<ResponderSpec>& responders);
std::vector<ResponderSpec> parse_trace_header(std::string_view text);

Bytes serialize_trace(const Trace& trace);
// Throws TraceError on a bad magic, truncated frame or bad header line.
Trace parse_trace(ByteView bytes);

Trace load_trace(const std::string& path);
void save_trace(const std::string& path, const Trace& trace);

// Three TCP flows (two to a listener, one refused) and one DNS query.
Trace make_sample_trace();

struct ReplayOptions {
    EngineConfig engine;
    // Packets of a flow wait this long for the relay's SYN/ACK.
    std::chrono::milliseconds gate_timeout{5000};
    // After the last frame, how long to wait for outstanding records.
    std::chrono::milliseconds drain_timeout{5000};
    RecordContext context;
};

struct ReplayResult {
    std::size_t frames_injected = 0;
    std::size_t frames_skipped = 0; // flows that were refused or never opened
    std::size_t expected_records = 0;
    EngineStats engine;
};

// Injects the trace through an in-memory tunnel into a fresh relay whose
// sockets are redirected to local responders built from the header.
// Records go to `sink` exactly as in a live run.
ReplayResult replay_trace(const Trace& trace, RecordSink& sink, const ReplayOptions& options = {});

} // namespace flowlens
