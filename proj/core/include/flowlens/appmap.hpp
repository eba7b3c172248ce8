// SPDX-License-Identifier: Apache-2.0
//
// Flow-to-application attribution from the kernel's socket tables, with a
// coordinator that lets one parse serve every concurrent requester.

#pragma once

#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "flowlens/packet.hpp"
#include "flowlens/sys.hpp"

namespace flowlens {

struct SocketTableEntry {
    Ipv4Addr local_addr;
    std::uint16_t local_port = 0;
    Ipv4Addr remote_addr;
    std::uint16_t remote_port = 0;
    std::int64_t owner_uid = -1;
    std::uint64_t inode = 0;

    bool operator==(const SocketTableEntry&) const = default;
};

// Parses /proc/net/{tcp,udp,tcp6,udp6} text. IPv6 rows are kept only when
// they carry a v4-mapped address. Rows that do not parse are skipped and
// counted in `malformed`.
std::vector<SocketTableEntry> parse_socket_table(std::string_view text, std::size_t* malformed = nullptr);

// Inverse of the parser for v4 rows; used by the mock source and tests.
std::string format_socket_table(const std::vector<SocketTableEntry>& entries);

struct AppIdentity {
    std::int64_t uid = -1;
    std::string name = "unknown:-1";
    std::int64_t resolved_at_us = 0; // bookkeeping only; not part of equality

    static AppIdentity unknown(std::int64_t uid = -1);
    bool operator==(const AppIdentity& o) const { return uid == o.uid && name == o.name; }
};

enum class SocketTable { Tcp, Tcp6, Udp, Udp6 };

class ProcSource {
public:
    virtual ~ProcSource() = default;
    virtual std::string read_table(SocketTable table) = 0;
};

class FileProcSource final : public ProcSource {
public:
    explicit FileProcSource(std::string root = "/proc/net") : root_(std::move(root)) {}
    std::string read_table(SocketTable table) override;

private:
    std::string root_;
};

// In-memory tables that tests mutate. reads() counts snapshots (reads of the
// Tcp table); `parse_cost` is slept once per snapshot.
class MockProcSource final : public ProcSource {
public:
    void set_parse_cost(std::chrono::microseconds cost);
    void add(SocketTable table, const SocketTableEntry& entry);
    void remove_local(SocketTable table, Ipv4Addr addr, std::uint16_t port);
    void clear();
    std::string read_table(SocketTable table) override;

    std::uint64_t reads() const;

private:
    mutable std::mutex mu_;
    std::map<SocketTable, std::vector<SocketTableEntry>> tables_;
    std::chrono::microseconds parse_cost_{0};
    std::uint64_t reads_ = 0;
};

class UidResolver {
public:
    virtual ~UidResolver() = default;
    virtual std::optional<std::string> name_for(std::int64_t uid) = 0;
};

// Consults the system user database.
class SystemUidResolver final : public UidResolver {
public:
    std::optional<std::string> name_for(std::int64_t uid) override;
};

class StaticUidResolver final : public UidResolver {
public:
    StaticUidResolver() = default;
    explicit StaticUidResolver(std::map<std::int64_t, std::string> names) : names_(std::move(names)) {}
    void set(std::int64_t uid, std::string name);
    std::optional<std::string> name_for(std::int64_t uid) override;

private:
    std::mutex mu_;
    std::map<std::int64_t, std::string> names_;
};

struct SocketSnapshot {
    std::int64_t taken_at_ns = 0; // when the read started
    std::vector<SocketTableEntry> tcp;
    std::vector<SocketTableEntry> udp;
};

// Reads and parses the tables for one protocol family (both v4 and v6 files).
SocketSnapshot take_snapshot(ProcSource& source, const Clock& clock);

// Looks the flow's app-side endpoint up in a snapshot. An exact
// local+remote match wins over a local-only or wildcard-local one.
std::optional<SocketTableEntry> find_owner(const SocketSnapshot& snap, const FlowKey& flow);

struct MappingStats {
    std::uint64_t lookups = 0;
    std::uint64_t parses_performed = 0;
    std::uint64_t parses_avoided = 0;
    std::uint64_t wait_rounds = 0;
    std::uint64_t gave_up = 0; // waits exhausted, served from a stale or no snapshot

    double mitigation_ratio() const {
        return lookups == 0 ? 0.0 : 1.0 - static_cast<double>(parses_performed) / static_cast<double>(lookups);
    }
};

class MappingCoordinator {
public:
    struct Options {
        std::chrono::milliseconds sleep_quantum{50};
        int max_rounds = 3;
    };

    MappingCoordinator(ProcSource& source, UidResolver& resolver, const Clock& clock = steady_clock());
    MappingCoordinator(ProcSource& source, UidResolver& resolver, const Clock& clock, Options options);

    // `connect_done_ns` is when the caller's connect finished (same clock);
    // only snapshots started at or after it may answer.
    AppIdentity map_flow(const FlowKey& flow, std::int64_t connect_done_ns);

    // Always parses; the per-flow baseline.
    AppIdentity map_eager(const FlowKey& flow);

    MappingStats stats() const;

private:
    AppIdentity identify(const SocketSnapshot& snap, const FlowKey& flow);

    ProcSource& source_;
    UidResolver& resolver_;
    const Clock& clock_;
    Options options_;

    mutable std::mutex mu_;
    std::condition_variable cv_;
    bool in_flight_ = false;
    std::shared_ptr<const SocketSnapshot> snapshot_;
    MappingStats stats_;
};

} // namespace flowlens
