// SPDX-License-Identifier: Apache-2.0

#include "flowlens/store.hpp"

#include <charconv>
#include <fstream>
#include <set>
#include <sstream>

#include "flowlens/instrument.hpp"

namespace flowlens {

namespace {

void append_escaped(std::string& out, std::string_view v) {
    for (char c : v) {
        switch (c) {
        case '\\': out += "\\\\"; break;
        case '\t': out += "\\t"; break;
        case '\n': out += "\\n"; break;
        default: out.push_back(c);
        }
    }
}

std::optional<std::string> unescape(std::string_view v) {
    std::string out;
    out.reserve(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (v[i] != '\\') {
            out.push_back(v[i]);
            continue;
        }
        if (++i == v.size()) return std::nullopt;
        switch (v[i]) {
        case '\\': out.push_back('\\'); break;
        case 't': out.push_back('\t'); break;
        case 'n': out.push_back('\n'); break;
        default: return std::nullopt;
        }
    }
    return out;
}

template <typename T>
bool parse_int(std::string_view s, T& out) {
    if (s.empty()) return false;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
    return ec == std::errc() && p == s.data() + s.size();
}

void field(std::string& out, const char* key, std::string_view value) {
    if (!out.empty()) out.push_back('\t');
    out += key;
    out.push_back('=');
    append_escaped(out, value);
}

[[noreturn]] void bad(const std::string& why) { throw StoreError(StoreError::Kind::BadRecord, why); }

} // namespace

std::string encode_record(const MeasurementRecord& rec) {
    std::string out;
    field(out, "kind", to_string(rec.kind));
    field(out, "app", std::to_string(rec.app.uid) + ":" + rec.app.name);
    field(out, "flow", rec.flow.to_string());
    field(out, "domain", rec.domain);
    field(out, "rtt_us", rec.rtt_us ? std::to_string(*rec.rtt_us) : std::string{});
    field(out, "outcome", to_string(rec.outcome));
    field(out, "network_type", to_string(rec.network_type));
    field(out, "network_label", rec.network_label);
    field(out, "taken_at", std::to_string(rec.taken_at));
    field(out, "session_id", rec.session_id);
    field(out, "device_id_hash", rec.device_id_hash);
    return out;
}

MeasurementRecord decode_record(std::string_view line) {
    std::map<std::string, std::string, std::less<>> kv;
    while (true) {
        const auto tab = line.find('\t');
        const std::string_view part = line.substr(0, tab);
        const auto eq = part.find('=');
        if (eq == std::string_view::npos) bad("field without '='");
        auto value = unescape(part.substr(eq + 1));
        if (!value) bad("bad escape");
        kv[std::string(part.substr(0, eq))] = std::move(*value);
        if (tab == std::string_view::npos) break;
        line = line.substr(tab + 1);
    }
    auto get = [&](const char* key) -> const std::string& {
        auto it = kv.find(key);
        if (it == kv.end()) bad(std::string("missing ") + key);
        return it->second;
    };

    MeasurementRecord r;
    auto kind = parse_measure_kind(get("kind"));
    if (!kind) bad("bad kind");
    r.kind = *kind;

    const std::string& app = get("app");
    const auto colon = app.find(':');
    if (colon == std::string::npos || !parse_int(std::string_view(app).substr(0, colon), r.app.uid)) bad("bad app");
    r.app.name = app.substr(colon + 1);

    auto flow = FlowKey::parse(get("flow"));
    if (!flow) bad("bad flow");
    r.flow = *flow;
    r.domain = get("domain");

    const std::string& rtt = get("rtt_us");
    if (!rtt.empty()) {
        std::int64_t v = 0;
        if (!parse_int(rtt, v) || v < 0) bad("bad rtt_us");
        r.rtt_us = v;
    }
    auto outcome = parse_outcome(get("outcome"));
    if (!outcome) bad("bad outcome");
    r.outcome = *outcome;
    auto nt = parse_network_type(get("network_type"));
    if (!nt) bad("bad network_type");
    r.network_type = *nt;
    r.network_label = get("network_label");
    if (!parse_int(get("taken_at"), r.taken_at)) bad("bad taken_at");
    r.session_id = get("session_id");
    r.device_id_hash = get("device_id_hash");
    return r;
}

LoadResult load_records(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw StoreError(StoreError::Kind::IoFailure, "cannot open " + path);
    std::ostringstream os;
    os << in.rdbuf();
    if (in.bad()) throw StoreError(StoreError::Kind::IoFailure, "read error on " + path);
    const std::string text = os.str();

    const auto first_nl = text.find('\n');
    const std::string_view header = std::string_view(text).substr(0, first_nl);
    if (header != kRecordLogHeader) {
        throw StoreError(StoreError::Kind::SchemaMismatch,
                         "unsupported record log header '" + std::string(header) + "' in " + path);
    }

    LoadResult out;
    if (first_nl == std::string::npos) return out;
    std::size_t pos = first_nl + 1;
    std::size_t lineno = 1;
    while (pos < text.size()) {
        ++lineno;
        const auto nl = text.find('\n', pos);
        if (nl == std::string::npos) {
            out.warnings.push_back("line " + std::to_string(lineno) + ": incomplete trailing line skipped");
            break;
        }
        const std::string_view line = std::string_view(text).substr(pos, nl - pos);
        pos = nl + 1;
        if (line.empty()) continue;
        try {
            out.records.push_back(decode_record(line));
        } catch (const StoreError& e) {
            out.warnings.push_back("line " + std::to_string(lineno) + ": " + e.what());
        }
    }
    return out;
}

void write_records(const std::string& path, const std::vector<MeasurementRecord>& records) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw StoreError(StoreError::Kind::IoFailure, "cannot create " + path);
    out << kRecordLogHeader << '\n';
    for (const auto& r : records) out << encode_record(r) << '\n';
    out.flush();
    if (!out) throw StoreError(StoreError::Kind::IoFailure, "write error on " + path);
}

RecordLog::RecordLog(std::string path) : path_(std::move(path)) {}

RecordLog::~RecordLog() {
    if (file_ != nullptr) std::fclose(file_);
}

void RecordLog::open() {
    if (file_ == nullptr) {
        file_ = std::fopen(path_.c_str(), "a+b");
        if (file_ == nullptr) throw StoreError(StoreError::Kind::IoFailure, "cannot open " + path_);
        std::fseek(file_, 0, SEEK_END);
        const long size = std::ftell(file_);
        std::string prefix;
        if (size <= 0) {
            prefix = std::string(kRecordLogHeader) + "\n";
        } else {
            // Terminate a partial line left behind by a crash.
            std::fseek(file_, -1, SEEK_END);
            if (std::fgetc(file_) != '\n') prefix = "\n";
            std::fseek(file_, 0, SEEK_END);
        }
        if (!prefix.empty() && (std::fputs(prefix.c_str(), file_) < 0 || std::fflush(file_) != 0)) {
            std::fclose(file_);
            file_ = nullptr;
            throw StoreError(StoreError::Kind::IoFailure, "cannot write header to " + path_);
        }
    }
}

void RecordLog::append(const MeasurementRecord& rec) {
    note_guarded_op(GuardedOp::StoreWrite);
    open();
    const std::string line = encode_record(rec) + "\n";
    if (std::fwrite(line.data(), 1, line.size(), file_) != line.size() || std::fflush(file_) != 0) {
        std::clearerr(file_);
        throw StoreError(StoreError::Kind::IoFailure, "write failed on " + path_);
    }
}

void RecordLog::flush() {
    if (file_ != nullptr) std::fflush(file_);
}

Signature signature_of(const MeasurementRecord& rec) {
    const std::string app = std::to_string(rec.app.uid) + ":" + rec.app.name;
    if (rec.outcome != Outcome::Success) return {SignatureClass::Error, app + "|" + to_string(rec.outcome)};
    if (rec.kind == MeasureKind::Dns) return {SignatureClass::Dns, app + "|" + rec.domain};
    return {SignatureClass::Tcp, app + "|" + rec.flow.destination().to_string()};
}

std::uint32_t LimiterThresholds::for_class(SignatureClass c) const {
    switch (c) {
    case SignatureClass::Error: return error;
    case SignatureClass::Dns: return dns;
    case SignatureClass::Tcp: return tcp;
    }
    return 0;
}

bool SessionLimiter::admit(const MeasurementRecord& rec) {
    const Signature sig = signature_of(rec);
    Counts& c = counts_[sig];
    if (c.admitted < thresholds_.for_class(sig.cls)) {
        ++c.admitted;
        ++total_admitted_;
        return true;
    }
    ++c.suppressed;
    ++total_suppressed_;
    return false;
}

void SessionLimiter::rollover() { counts_.clear(); }

std::uint64_t SessionLimiter::admitted(const Signature& sig) const {
    auto it = counts_.find(sig);
    return it == counts_.end() ? 0 : it->second.admitted;
}

std::uint64_t SessionLimiter::suppressed(const Signature& sig) const {
    auto it = counts_.find(sig);
    return it == counts_.end() ? 0 : it->second.suppressed;
}

RecordStore::RecordStore(std::string path, LimiterThresholds thresholds)
    : limiter_(thresholds), log_(std::move(path)) {}

SubmitResult RecordStore::submit(const MeasurementRecord& rec) {
    ++stats_.submitted;
    if (!limiter_.admit(rec)) {
        ++stats_.suppressed;
        return SubmitResult::Suppressed;
    }
    for (int attempt = 0; attempt < 2; ++attempt) {
        try {
            log_.append(rec);
            ++stats_.persisted;
            return SubmitResult::Persisted;
        } catch (const StoreError&) {
            if (attempt == 0) ++stats_.retried;
        }
    }
    ++stats_.dropped;
    return SubmitResult::Dropped;
}

void CollectingSink::submit(MeasurementRecord rec) {
    {
        std::lock_guard lk(mu_);
        records_.push_back(std::move(rec));
    }
    cv_.notify_all();
}

std::vector<MeasurementRecord> CollectingSink::records() const {
    std::lock_guard lk(mu_);
    return records_;
}

std::size_t CollectingSink::size() const {
    std::lock_guard lk(mu_);
    return records_.size();
}

bool CollectingSink::wait_for(std::size_t n, std::chrono::milliseconds timeout) const {
    std::unique_lock lk(mu_);
    return cv_.wait_for(lk, timeout, [&] { return records_.size() >= n; });
}

StoreWorker::StoreWorker(std::string path, LimiterThresholds thresholds)
    : store_(std::move(path), thresholds), thread_([this] { run(); }) {}

void RecordStore::open() { log_.open(); }

StoreWorker::~StoreWorker() { stop(); }

void StoreWorker::submit(MeasurementRecord rec) {
    {
        std::lock_guard lk(mu_);
        if (stopping_) return;
        queue_.push_back(Item{std::move(rec)});
    }
    cv_.notify_one();
}

void StoreWorker::rollover() {
    {
        std::lock_guard lk(mu_);
        queue_.push_back(Item{});
    }
    cv_.notify_one();
}

void StoreWorker::run() {
    set_worker_role(WorkerRole::StoreWorker);
    try {
        store_.open();
    } catch (const StoreError&) {
        // Reported per record through the retry/drop counters.
    }
    std::unique_lock lk(mu_);
    while (true) {
        cv_.wait(lk, [this] { return stopping_ || !queue_.empty(); });
        if (queue_.empty()) break;
        Item item = std::move(queue_.front());
        queue_.pop_front();
        busy_ = true;
        lk.unlock();
        if (item.rec) {
            store_.submit(*item.rec);
        } else {
            store_.rollover();
        }
        lk.lock();
        busy_ = false;
        snapshot_ = store_.stats();
        if (queue_.empty()) idle_cv_.notify_all();
    }
    lk.unlock();
    store_.flush();
    lk.lock();
    idle_cv_.notify_all();
}

void StoreWorker::sync() {
    std::unique_lock lk(mu_);
    idle_cv_.wait(lk, [this] { return queue_.empty() && !busy_; });
}

void StoreWorker::stop() {
    {
        std::lock_guard lk(mu_);
        stopping_ = true;
    }
    cv_.notify_all();
    if (thread_.joinable()) thread_.join();
}

StoreStats StoreWorker::stats() const {
    std::lock_guard lk(mu_);
    return snapshot_;
}

} // namespace flowlens
