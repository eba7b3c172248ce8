// SPDX-License-Identifier: Apache-2.0
//
// The main event worker: owns the flow table, the epoll set and every TCP
// state machine. Blocking work (connect, DNS, app mapping, record output)
// runs on short-lived workers that report back through an inbox.

#pragma once

#include <atomic>
#include <chrono>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>

#include "flowlens/appmap.hpp"
#include "flowlens/measure.hpp"
#include "flowlens/store.hpp"
#include "flowlens/sys.hpp"
#include "flowlens/tunnel.hpp"

namespace flowlens {

struct EngineConfig {
    std::size_t flow_capacity = 1000;
    std::size_t max_connect_workers = 128;
    std::chrono::milliseconds connect_timeout{10'000};
    std::chrono::milliseconds dns_timeout{5'000};
    std::chrono::milliseconds udp_idle_timeout{60'000};
    std::size_t pre_connect_buffer_limit = 64 * 1024;
    std::uint16_t dns_port = 53;
    SocketMark mark;
    std::optional<std::uint32_t> iss_seed; // fixed seed for reproducible ISNs
};

struct EngineDeps {
    SocketApi* sockets = nullptr;       // defaults to posix_sockets()
    const Clock* clock = nullptr;       // defaults to steady_clock()
    MappingCoordinator* mapper = nullptr; // null: every flow maps to unknown:-1
    RecordSink* sink = nullptr;         // null: records are discarded
    std::function<RecordContext()> context;
};

struct EngineStats {
    std::uint64_t cycles = 0;
    std::uint64_t tunnel_packets = 0;
    std::uint64_t malformed_dropped = 0;
    std::uint64_t fragments_dropped = 0;
    std::uint64_t unsupported_dropped = 0;
    std::uint64_t dead_flow_resets = 0;
    std::uint64_t capacity_refusals = 0;
    std::uint64_t tcp_flows_opened = 0;
    std::uint64_t tcp_flows_closed = 0;
    std::uint64_t udp_associations_opened = 0;
    std::uint64_t udp_associations_expired = 0;
    std::uint64_t udp_send_failures = 0;
    std::uint64_t dns_queries = 0;
    std::uint64_t workers_spawned = 0;
    std::uint64_t workers_peak = 0;
    std::uint64_t pre_connect_overflows = 0;
    std::uint64_t records_emitted = 0;
    std::uint64_t dummy_packets = 0;
};

// What one multiplexer wakeup serviced.
struct CycleInfo {
    std::uint64_t cycle = 0;
    std::size_t socket_events = 0;
    std::size_t tunnel_packets = 0;
    std::size_t messages = 0;
};

class RelayEngine {
public:
    RelayEngine(EngineConfig config, ReadQueue& reads, WriteQueue& writes, EngineDeps deps);
    ~RelayEngine();
    RelayEngine(const RelayEngine&) = delete;
    RelayEngine& operator=(const RelayEngine&) = delete;

    // Runs the loop on the calling thread until the shutdown dummy arrives
    // or request_stop() is called. Live flows are reset and every worker is
    // joined before it returns. Throws std::system_error on epoll failure.
    void run();

    // Thread-safe.
    void request_stop();

    // Thread-safe snapshots.
    std::size_t flow_count() const;      // TCP flows plus UDP associations
    std::size_t tcp_flow_count() const;
    std::size_t udp_association_count() const;
    std::size_t lingering_count() const; // closed flows still flushing to their socket
    std::size_t active_workers() const;
    EngineStats stats() const;
    bool running() const;

    // Test hooks; set before run().
    void set_cycle_observer(std::function<void(const CycleInfo&)> fn);
    void set_before_wait(std::function<void()> fn);

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

} // namespace flowlens
