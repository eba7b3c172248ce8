// SPDX-License-Identifier: Apache-2.0
//
// Per-session rate limiting and the append-only record log.
//
// Log format: a header line "#flowlens-records v1", then one record per
// line as tab-separated key=value pairs. Keys are the MeasurementRecord field
// names. Values escape backslash, tab and newline as \\, \t and \n.

#pragma once

#include <condition_variable>
#include <cstdint>
#include <cstdio>
#include <deque>
#include <map>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "flowlens/measure.hpp"

namespace flowlens {

inline constexpr const char* kRecordLogHeader = "#flowlens-records v1";

class StoreError : public std::runtime_error {
public:
    enum class Kind { SchemaMismatch, IoFailure, BadRecord };
    StoreError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
    Kind kind() const noexcept { return kind_; }

private:
    Kind kind_;
};

std::string encode_record(const MeasurementRecord& rec);
// Throws StoreError(BadRecord).
MeasurementRecord decode_record(std::string_view line);

struct LoadResult {
    std::vector<MeasurementRecord> records;
    std::vector<std::string> warnings;
};

// Throws SchemaMismatch when the header is missing or names another version,
// IoFailure when the file cannot be read. Bad lines become warnings.
LoadResult load_records(const std::string& path);

// Writes a complete log (header plus records) in one go.
void write_records(const std::string& path, const std::vector<MeasurementRecord>& records);

class RecordLog {
public:
    // Appends to `path`, writing the header if the file is new or empty.
    explicit RecordLog(std::string path);
    ~RecordLog();
    RecordLog(const RecordLog&) = delete;
    RecordLog& operator=(const RecordLog&) = delete;

    // Creates the file and header if needed. Throws StoreError(IoFailure).
    void open();
    // Throws StoreError(IoFailure).
    void append(const MeasurementRecord& rec);
    void flush();
    const std::string& path() const { return path_; }

private:
    std::string path_;
    std::FILE* file_ = nullptr;
};

enum class SignatureClass { Error, Dns, Tcp };

struct Signature {
    SignatureClass cls = SignatureClass::Tcp;
    std::string key;
    auto operator<=>(const Signature&) const = default;
};

// Failures are keyed on (app, outcome); successful DNS samples on
// (app, question name); successful TCP samples on (app, dst addr, dst port).
Signature signature_of(const MeasurementRecord& rec);

struct LimiterThresholds {
    std::uint32_t error = 50;
    std::uint32_t dns = 100;
    std::uint32_t tcp = 200;

    std::uint32_t for_class(SignatureClass c) const;
};

class SessionLimiter {
public:
    explicit SessionLimiter(LimiterThresholds thresholds = {}) : thresholds_(thresholds) {}

    // True if the record may be persisted; counts it either way.
    bool admit(const MeasurementRecord& rec);
    void rollover();

    std::uint64_t admitted(const Signature& sig) const;
    std::uint64_t suppressed(const Signature& sig) const;
    std::uint64_t total_admitted() const { return total_admitted_; }
    std::uint64_t total_suppressed() const { return total_suppressed_; }
    const LimiterThresholds& thresholds() const { return thresholds_; }

private:
    struct Counts {
        std::uint64_t admitted = 0;
        std::uint64_t suppressed = 0;
    };
    LimiterThresholds thresholds_;
    std::map<Signature, Counts> counts_;
    std::uint64_t total_admitted_ = 0;
    std::uint64_t total_suppressed_ = 0;
};

enum class SubmitResult { Persisted, Suppressed, Dropped };

struct StoreStats {
    std::uint64_t submitted = 0;
    std::uint64_t persisted = 0;
    std::uint64_t suppressed = 0;
    std::uint64_t retried = 0;
    std::uint64_t dropped = 0;
};

// Limiter plus log; not thread-safe on its own.
class RecordStore {
public:
    RecordStore(std::string path, LimiterThresholds thresholds = {});

    SubmitResult submit(const MeasurementRecord& rec);
    void open();
    void rollover() { limiter_.rollover(); }
    void flush() { log_.flush(); }

    const SessionLimiter& limiter() const { return limiter_; }
    const StoreStats& stats() const { return stats_; }

private:
    SessionLimiter limiter_;
    RecordLog log_;
    StoreStats stats_;
};

class RecordSink {
public:
    virtual ~RecordSink() = default;
    virtual void submit(MeasurementRecord rec) = 0;
};

// Collects records in memory; for tests and the replay command.
class CollectingSink final : public RecordSink {
public:
    void submit(MeasurementRecord rec) override;
    std::vector<MeasurementRecord> records() const;
    std::size_t size() const;
    // Waits until at least `n` records arrived or the timeout passes.
    bool wait_for(std::size_t n, std::chrono::milliseconds timeout) const;

private:
    mutable std::mutex mu_;
    mutable std::condition_variable cv_;
    std::vector<MeasurementRecord> records_;
};

// The single consumer of record submissions; owns the RecordStore.
class StoreWorker final : public RecordSink {
public:
    StoreWorker(std::string path, LimiterThresholds thresholds = {});
    ~StoreWorker() override;

    void submit(MeasurementRecord rec) override;
    // Applies to records submitted after this call.
    void rollover();
    // Drains the queue, flushes and joins. Idempotent.
    void stop();
    // Blocks until everything submitted so far has been handled.
    void sync();

    StoreStats stats() const;

private:
    struct Item {
        std::optional<MeasurementRecord> rec; // empty = rollover marker
    };
    void run();

    RecordStore store_;
    mutable std::mutex mu_;
    std::condition_variable cv_;
    std::condition_variable idle_cv_;
    std::deque<Item> queue_;
    bool stopping_ = false;
    bool busy_ = false;
    StoreStats snapshot_;
    std::thread thread_;
};

} // namespace flowlens
