// SPDX-License-Identifier: Apache-2.0
//
// Microbenchmark harness: tunnel write paths, eager vs lazy app mapping, and
// blocking vs polling tunnel reads. Everything runs unprivileged on the
// in-memory tunnel; event counts are deterministic for a given seed, the
// latencies are not.

#pragma once

#include <chrono>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "flowlens/appmap.hpp"
#include "flowlens/bytes.hpp"
#include "flowlens/tunnel.hpp"

namespace flowlens::bench {

// ---- write paths ----

struct TracePacket {
    std::int64_t offset_ns = 0; // from trace start
    Bytes packet;
};

struct WriteTraceSpec {
    std::size_t packets = 10'000;
    double mean_gap_ms = 1.0; // exponential inter-arrival gaps
    std::uint32_t seed = 1;
    std::size_t min_payload = 0;
    std::size_t max_payload = 1400;
};

std::vector<TracePacket> make_write_trace(const WriteTraceSpec& spec);

enum class WriteMode { DirectWrite, QueueWritePlain, QueueWriteCounter };

const char* to_string(WriteMode m); // "direct", "plain", "counter"
std::optional<WriteMode> parse_write_mode(std::string_view s);

struct WriteBenchOptions {
    WriteMode mode = WriteMode::QueueWriteCounter;
    // Busy time of one tunnel write.
    std::chrono::microseconds tunnel_write_cost{100};
    // Threads burning CPU alongside the measured path.
    std::size_t cpu_contenders = 1;
    // A second producer writing to the same tunnel at the trace's rate.
    bool contending_producer = true;
    std::uint32_t spin_threshold = 256;
};

struct WriteBenchResult {
    WriteMode mode = WriteMode::QueueWriteCounter;
    std::vector<double> latency_ms;       // time inside the write/enqueue call, per trace packet
    std::vector<std::uint64_t> histogram; // analysis buckets; empty for an empty trace
    std::uint64_t packets_written = 0;    // reached the tunnel, contender included
    WriteQueueStats queue;

    double fraction_over(double ms) const;
};

WriteBenchResult bench_write_schemes(std::span<const TracePacket> trace, const WriteBenchOptions& options);

// Rows: Total then one per bucket; one column per result.
std::string format_write_table(std::span<const WriteBenchResult> results);

// ---- app mapping ----

enum class MapMode { Eager, Lazy };

const char* to_string(MapMode m);

struct MappingBenchOptions {
    std::size_t flows = 481;
    MapMode mode = MapMode::Lazy;
    std::chrono::microseconds parse_cost{5000};
    // Connect completions are spread uniformly over this window.
    std::chrono::milliseconds burst_window{500};
    std::size_t apps = 16;
    std::uint32_t seed = 1;
};

struct MappingBenchResult {
    MapMode mode = MapMode::Lazy;
    std::size_t flows = 0;
    std::uint64_t parse_count = 0;
    double mitigation_ratio = 0.0;
    std::vector<double> latency_ms;      // connect completion to answer, per flow
    std::vector<AppIdentity> answers;    // per flow
    std::vector<AppIdentity> oracle;     // per-flow eager lookup over the final tables
    std::size_t matches = 0;
};

MappingBenchResult bench_mapping(const MappingBenchOptions& options);

std::string format_mapping_report(std::span<const MappingBenchResult> results);

// ---- tunnel reads ----

enum class ReadMode { Blocking, FixedSleep100ms, AdaptiveSleep };

const char* to_string(ReadMode m); // "blocking", "sleep100", "adaptive"
std::optional<ReadMode> parse_read_mode(std::string_view s);

// Offsets (ns from start) for `n` packets with exponential gaps.
std::vector<std::int64_t> make_read_schedule(std::size_t n, double mean_gap_ms, std::uint32_t seed);

struct ReadBenchOptions {
    ReadMode mode = ReadMode::Blocking;
    std::vector<std::int64_t> schedule_ns;
    // Quiet period after the last packet, before the shutdown dummy.
    std::chrono::milliseconds idle_tail{0};
};

struct ReadBenchResult {
    ReadMode mode = ReadMode::Blocking;
    std::vector<double> delay_ms; // retrieval time minus injection time
    std::uint64_t packets = 0;
    // Blocking: blocked reads that were woken. Polling: sleep/read rounds.
    std::uint64_t wakeups_before_stop = 0;
    std::uint64_t wakeups_total = 0;
    bool dummy_seen = false;

    double median_ms() const;
};

ReadBenchResult bench_read_modes(const ReadBenchOptions& options);

std::string format_read_report(std::span<const ReadBenchResult> results);

} // namespace flowlens::bench
