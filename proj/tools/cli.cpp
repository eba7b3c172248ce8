// SPDX-License-Identifier: Apache-2.0

#include "cli.hpp"

#include <csignal>
#include <ctime>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <random>
#include <sstream>

#include <openssl/crypto.h>
#include <unistd.h>

#include <CLI11.hpp>
#include <json.hpp>

#include "flowlens/analysis.hpp"
#include "flowlens/appmap.hpp"
#include "flowlens/bench.hpp"
#include "flowlens/loopback.hpp"
#include "flowlens/relay.hpp"
#include "flowlens/sim.hpp"
#include "flowlens/store.hpp"
#include "flowlens/trace.hpp"

namespace flowlens::cli {

namespace {

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct Settings {
    std::string tunnel = "mem";
    std::string ifname = "fl0";
    std::uint32_t mark = 0;
    std::string log = "flowlens.log";
    std::string salt;
    std::uint32_t threshold_error = 50;
    std::uint32_t threshold_dns = 100;
    std::uint32_t threshold_tcp = 200;
    std::optional<std::size_t> min_count;
    std::uint32_t timeout_connect_ms = 10'000;
    std::uint32_t timeout_dns_ms = 5'000;
    std::string network_type = "Wired";
    std::string network_label;
    std::string device_id;
};

// Flat key=value config; a key only applies when its flag was not given.
class ConfigKeys {
public:
    using Setter = std::function<void(const std::string&)>;

    void declare(const std::string& key, Setter setter) { setters_[key] = std::move(setter); }
    void bind(const std::string& key, CLI::Option* opt) { options_[key].push_back(opt); }

    void apply_file(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw UsageError("cannot read config " + path);
        std::string line;
        int lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            const std::string t = trim(line);
            if (t.empty() || t[0] == '#') continue;
            const auto eq = t.find('=');
            if (eq == std::string::npos) {
                throw UsageError(path + ":" + std::to_string(lineno) + ": expected key=value");
            }
            const std::string key = trim(t.substr(0, eq));
            const std::string value = trim(t.substr(eq + 1));
            auto it = setters_.find(key);
            if (it == setters_.end()) throw UsageError(path + ":" + std::to_string(lineno) + ": unknown key '" + key + "'");
            bool given = false;
            for (auto* opt : options_[key]) given = given || opt->count() > 0;
            if (given) continue;
            try {
                it->second(value);
            } catch (const std::exception&) {
                throw UsageError(path + ":" + std::to_string(lineno) + ": bad value for '" + key + "'");
            }
        }
    }

private:
    static std::string trim(const std::string& s) {
        const auto b = s.find_first_not_of(" \t\r");
        if (b == std::string::npos) return {};
        const auto e = s.find_last_not_of(" \t\r");
        return s.substr(b, e - b + 1);
    }

    std::map<std::string, Setter> setters_;
    std::map<std::string, std::vector<CLI::Option*>> options_;
};

std::uint32_t to_u32(const std::string& v) {
    std::size_t used = 0;
    const unsigned long n = std::stoul(v, &used, 0);
    if (used != v.size() || n > 0xffffffffUL) throw std::invalid_argument(v);
    return static_cast<std::uint32_t>(n);
}

Bytes parse_salt(const std::string& hex) {
    if (hex.empty()) return {};
    long len = 0;
    unsigned char* buf = OPENSSL_hexstr2buf(hex.c_str(), &len);
    if (!buf) throw UsageError("--salt is not valid hex");
    Bytes out(buf, buf + len);
    OPENSSL_free(buf);
    return out;
}

RecordContext make_context(const Settings& s) {
    RecordContext c;
    auto nt = parse_network_type(s.network_type);
    if (!nt) throw UsageError("unknown network type '" + s.network_type + "'");
    c.network_type = *nt;
    c.network_label = s.network_label;
    std::random_device rd;
    std::ostringstream sid;
    sid << std::hex << rd() << rd();
    c.session_id = sid.str();
    std::string device = s.device_id;
    if (device.empty()) {
        char host[256] = {};
        if (::gethostname(host, sizeof host - 1) == 0) device = host;
    }
    c.device_id_hash = device_id_digest(device, parse_salt(s.salt));
    return c;
}

LimiterThresholds thresholds_of(const Settings& s) {
    return {s.threshold_error, s.threshold_dns, s.threshold_tcp};
}

EngineConfig engine_config_of(const Settings& s) {
    EngineConfig e;
    e.connect_timeout = std::chrono::milliseconds(s.timeout_connect_ms);
    e.dns_timeout = std::chrono::milliseconds(s.timeout_dns_ms);
    if (s.mark != 0) e.mark = SocketMark::fwmark(s.mark);
    return e;
}

// Creates the log (and its header) up front so a bad path is a config error.
void check_log_path(const std::string& path) {
    try {
        RecordLog log(path);
        log.open();
    } catch (const StoreError& e) {
        throw UsageError(e.what());
    }
}

// Forwards to the store and echoes each record as a log line.
class TeeSink final : public RecordSink {
public:
    TeeSink(RecordSink& inner, std::ostream& out) : inner_(inner), out_(out) {}
    void submit(MeasurementRecord rec) override {
        {
            std::lock_guard lk(mu_);
            out_ << encode_record(rec) << '\n' << std::flush;
            seen_.push_back(rec);
        }
        inner_.submit(std::move(rec));
    }
    std::vector<MeasurementRecord> seen() const {
        std::lock_guard lk(mu_);
        return seen_;
    }

private:
    RecordSink& inner_;
    std::ostream& out_;
    mutable std::mutex mu_;
    std::vector<MeasurementRecord> seen_;
};

class SignalGuard {
public:
    SignalGuard() {
        sigemptyset(&set_);
        sigaddset(&set_, SIGINT);
        sigaddset(&set_, SIGTERM);
        pthread_sigmask(SIG_BLOCK, &set_, &old_);
    }
    ~SignalGuard() { pthread_sigmask(SIG_SETMASK, &old_, nullptr); }

    bool wait(std::chrono::milliseconds timeout) {
        if (interrupted_) return true;
        timespec ts{static_cast<time_t>(timeout.count() / 1000), static_cast<long>(timeout.count() % 1000) * 1'000'000};
        interrupted_ = sigtimedwait(&set_, nullptr, &ts) > 0;
        return interrupted_;
    }

private:
    sigset_t set_{};
    sigset_t old_{};
    bool interrupted_ = false;
};

const Endpoint kSelftestServer{Ipv4Addr(203, 0, 113, 10), 80};
const Endpoint kSelftestResolver{Ipv4Addr(203, 0, 113, 53), 53};
constexpr std::int64_t kSelftestUid = 10001;

// One scripted exchange: a small TCP echo and a DNS query.
void selftest_round(SimHost& host, std::uint16_t txn, std::ostream& err) {
    using namespace std::chrono_literals;
    if (auto c = host.connect(kSelftestServer, 1000ms)) {
        const Bytes payload(512, static_cast<std::uint8_t>(txn));
        if (!c->send(payload, 1000ms) || c->wait_received(payload.size(), 1000ms) != payload.size()) {
            err << "selftest: echo incomplete\n";
        }
        c->shutdown_write();
        c->wait_closed(1000ms);
    } else {
        err << "selftest: connect failed\n";
    }
    auto u = host.udp();
    u->send_to(kSelftestResolver, build_dns_query(txn, "selftest.flowlens.invalid"));
    if (!u->recv(1000ms)) err << "selftest: no DNS reply\n";
}

int cmd_run(const Settings& s, bool selftest, std::uint64_t rounds, std::uint32_t interval_ms, std::ostream& out,
            std::ostream& err) {
    if (selftest && s.tunnel != "mem") throw UsageError("--selftest needs --tunnel mem");
    const RecordContext context = make_context(s);
    check_log_path(s.log);

    std::shared_ptr<TunnelEndpoint> endpoint;
    std::shared_ptr<TunnelEndpoint> app_side;
    if (s.tunnel == "tun") {
        TunConfig tc;
        tc.ifname = s.ifname;
        try {
            endpoint = std::make_shared<OsTunDevice>(tc);
        } catch (const TunOpenError& e) {
            err << "flowlens: cannot open tunnel: " << e.what() << '\n';
            return kExitTunnel;
        }
    } else {
        auto t = InMemoryTunnel::create();
        endpoint = t.relay;
        app_side = t.app;
    }

    RedirectingSocketApi redirect(posix_sockets());
    std::unique_ptr<TcpEchoServer> echo;
    std::unique_ptr<DnsResponder> resolver;
    MockProcSource mock_proc;
    StaticUidResolver static_names({{kSelftestUid, "selftest.client"}});
    FileProcSource proc;
    SystemUidResolver system_names;
    std::unique_ptr<MappingCoordinator> mapper;
    if (selftest) {
        echo = std::make_unique<TcpEchoServer>();
        DnsResponder::Options ro;
        ro.delay = std::chrono::milliseconds(2);
        resolver = std::make_unique<DnsResponder>(ro);
        redirect.add(kSelftestServer, echo->endpoint());
        redirect.add(kSelftestResolver, resolver->endpoint());
        mapper = std::make_unique<MappingCoordinator>(mock_proc, static_names);
    } else if (s.tunnel == "tun") {
        mapper = std::make_unique<MappingCoordinator>(proc, system_names);
    }

    SignalGuard signals; // before any thread starts, so all of them inherit the mask
    StoreWorker store(s.log, thresholds_of(s));
    TeeSink tee(store, out);

    EngineDeps deps;
    deps.sockets = selftest ? static_cast<SocketApi*>(&redirect) : &posix_sockets();
    deps.mapper = mapper.get();
    deps.sink = &tee;
    deps.context = [context] { return context; };
    RelayOptions options;
    options.engine = engine_config_of(s);
    Relay relay(options, endpoint, deps);
    relay.start();
    err << "flowlens: relaying on " << (s.tunnel == "tun" ? s.ifname : std::string("in-memory tunnel"))
        << "; interrupt to stop\n";

    if (selftest) {
        SimHost host(app_side, Ipv4Addr(10, 0, 0, 2), kSelftestUid);
        host.publish_sockets(&mock_proc);
        for (std::uint64_t i = 0; rounds == 0 || i < rounds; ++i) {
            selftest_round(host, static_cast<std::uint16_t>(i + 1), err);
            if (signals.wait(std::chrono::milliseconds(interval_ms))) break;
        }
        host.stop();
    } else {
        while (!signals.wait(std::chrono::milliseconds(1000))) {
            if (relay.failure()) break;
        }
    }

    relay.stop();
    store.stop();
    const EngineStats es = relay.engine().stats();
    const StoreStats ss = store.stats();

    const auto seen = tee.seen();
    out << format_summary_tsv(group_summary(seen, GroupKey::App, 1), "app");
    err << "flowlens: stopped; flows_reset=" << es.dead_flow_resets << " dummy_packets=" << es.dummy_packets
        << " records=" << ss.submitted << " persisted=" << ss.persisted << " suppressed=" << ss.suppressed << '\n';
    if (auto f = relay.failure()) {
        try {
            std::rethrow_exception(f);
        } catch (const std::exception& e) {
            err << "flowlens: relay failed: " << e.what() << '\n';
        }
        return kExitUsage;
    }
    return kExitOk;
}

int cmd_replay(const Settings& s, const std::string& path, std::ostream& out, std::ostream& err) {
    Trace trace;
    {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw UsageError("cannot open trace " + path);
        const Bytes data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        if (!data.empty()) {
            try {
                trace = parse_trace(data);
            } catch (const TraceError& e) {
                throw UsageError(path + ": " + e.what());
            }
        }
    }
    const RecordContext context = make_context(s);
    check_log_path(s.log);
    StoreWorker store(s.log, thresholds_of(s));
    TeeSink tee(store, out);
    ReplayOptions ro;
    ro.engine = engine_config_of(s);
    ro.context = context;
    const ReplayResult r = replay_trace(trace, tee, ro);
    store.stop();
    const StoreStats ss = store.stats();
    err << "flowlens: replayed " << r.frames_injected << " frames (" << r.frames_skipped << " skipped); records="
        << ss.submitted << " persisted=" << ss.persisted << " suppressed=" << ss.suppressed << '\n';
    return kExitOk;
}

struct AnalyzeArgs {
    std::string path;
    std::string report = "apps";
    std::string kind;
    std::string app;
    std::string network_type;
};

int cmd_analyze(const Settings& s, const AnalyzeArgs& a, std::ostream& out, std::ostream& err) {
    LoadResult loaded;
    try {
        loaded = load_records(a.path);
    } catch (const StoreError& e) {
        err << "flowlens: " << e.what() << '\n';
        return kExitUsage;
    }
    for (const auto& w : loaded.warnings) err << "flowlens: " << w << '\n';

    std::string kind = a.kind;
    if (kind.empty()) kind = a.report == "dns" ? "dns" : "tcp";
    std::optional<NetworkType> nt;
    if (!a.network_type.empty()) {
        nt = parse_network_type(a.network_type);
        if (!nt) throw UsageError("unknown network type '" + a.network_type + "'");
    }
    const RecordFilter filter = [&](const MeasurementRecord& r) {
        if (kind == "tcp" && r.kind != MeasureKind::TcpConnect) return false;
        if (kind == "dns" && r.kind != MeasureKind::Dns) return false;
        if (!a.app.empty() && r.app.name != a.app) return false;
        if (nt && r.network_type != *nt) return false;
        return true;
    };

    if (a.report == "cdf") {
        std::vector<std::int64_t> values;
        for (const auto& r : loaded.records) {
            if (r.outcome == Outcome::Success && r.rtt_us && filter(r)) values.push_back(*r.rtt_us);
        }
        if (values.empty()) {
            err << "flowlens: no successful samples match\n";
            return kExitOk;
        }
        out << format_cdf(cdf(RttSeries::from_unsorted("all", std::move(values))));
        return kExitOk;
    }
    GroupKey key = GroupKey::App;
    std::string header = "app";
    std::size_t min_count = 1000;
    if (a.report == "dns") {
        key = GroupKey::NetworkType;
        header = "network_type";
        min_count = 100;
    } else if (a.report == "isps") {
        key = GroupKey::NetworkTypeAndLabel;
        header = "network";
        min_count = 100;
    }
    if (s.min_count) min_count = *s.min_count;
    out << format_summary_tsv(group_summary(loaded.records, key, min_count, filter), header);
    return kExitOk;
}

nlohmann::json record_json(const MeasurementRecord& r) {
    nlohmann::json j;
    j["kind"] = to_string(r.kind);
    j["app"] = r.app.name;
    j["uid"] = r.app.uid;
    j["flow"] = r.flow.to_string();
    if (!r.domain.empty()) j["domain"] = r.domain;
    j["rtt_us"] = r.rtt_us ? nlohmann::json(*r.rtt_us) : nlohmann::json(nullptr);
    j["outcome"] = to_string(r.outcome);
    j["network_type"] = to_string(r.network_type);
    j["network_label"] = r.network_label;
    j["taken_at_us"] = r.taken_at;
    j["session_id"] = r.session_id;
    j["device_id_hash"] = r.device_id_hash;
    return j;
}

int cmd_export(const std::string& path, const std::string& out_path, std::ostream& out, std::ostream& err) {
    LoadResult loaded;
    try {
        loaded = load_records(path);
    } catch (const StoreError& e) {
        err << "flowlens: " << e.what() << '\n';
        return kExitUsage;
    }
    for (const auto& w : loaded.warnings) err << "flowlens: " << w << '\n';
    nlohmann::json batch;
    batch["format"] = "flowlens-batch";
    batch["version"] = 1;
    batch["records"] = nlohmann::json::array();
    for (const auto& r : loaded.records) batch["records"].push_back(record_json(r));
    if (out_path.empty() || out_path == "-") {
        out << batch.dump() << '\n';
    } else {
        std::ofstream f(out_path, std::ios::trunc);
        f << batch.dump() << '\n';
        if (!f) throw UsageError("cannot write " + out_path);
        err << "flowlens: exported " << loaded.records.size() << " records to " << out_path << '\n';
    }
    return kExitOk;
}

struct BenchArgs {
    std::string scheme = "all";
    std::string mode = "all";
    std::size_t packets = 0;
    std::size_t n = 481;
    std::uint32_t seed = 1;
    double gap_ms = 0;
    double parse_cost_ms = 5.0;
    std::uint32_t window_ms = 500;
    std::size_t contenders = 1;
    std::uint32_t write_cost_us = 100;
    std::uint32_t idle_ms = 0;
};

int cmd_bench_write(const BenchArgs& a, std::ostream& out) {
    std::vector<bench::WriteMode> modes;
    if (a.scheme == "all") {
        modes = {bench::WriteMode::DirectWrite, bench::WriteMode::QueueWritePlain, bench::WriteMode::QueueWriteCounter};
    } else if (auto m = bench::parse_write_mode(a.scheme)) {
        modes = {*m};
    } else {
        throw UsageError("unknown write scheme '" + a.scheme + "'");
    }
    bench::WriteTraceSpec spec;
    spec.packets = a.packets ? a.packets : 10'000;
    spec.mean_gap_ms = a.gap_ms > 0 ? a.gap_ms : 1.0;
    spec.seed = a.seed;
    const auto trace = bench::make_write_trace(spec);
    std::vector<bench::WriteBenchResult> results;
    for (auto m : modes) {
        bench::WriteBenchOptions o;
        o.mode = m;
        o.cpu_contenders = a.contenders;
        o.tunnel_write_cost = std::chrono::microseconds(a.write_cost_us);
        results.push_back(bench::bench_write_schemes(trace, o));
    }
    out << bench::format_write_table(results);
    return kExitOk;
}

int cmd_bench_map(const BenchArgs& a, std::ostream& out) {
    std::vector<bench::MapMode> modes;
    if (a.mode == "all" || a.mode == "both") {
        modes = {bench::MapMode::Eager, bench::MapMode::Lazy};
    } else if (a.mode == "eager") {
        modes = {bench::MapMode::Eager};
    } else if (a.mode == "lazy") {
        modes = {bench::MapMode::Lazy};
    } else {
        throw UsageError("unknown mapping mode '" + a.mode + "'");
    }
    std::vector<bench::MappingBenchResult> results;
    for (auto m : modes) {
        bench::MappingBenchOptions o;
        o.flows = a.n;
        o.mode = m;
        o.parse_cost = std::chrono::microseconds(static_cast<std::int64_t>(a.parse_cost_ms * 1000));
        o.burst_window = std::chrono::milliseconds(a.window_ms);
        o.seed = a.seed;
        results.push_back(bench::bench_mapping(o));
    }
    out << bench::format_mapping_report(results);
    return kExitOk;
}

int cmd_bench_read(const BenchArgs& a, std::ostream& out) {
    std::vector<bench::ReadMode> modes;
    if (a.mode == "all") {
        modes = {bench::ReadMode::Blocking, bench::ReadMode::FixedSleep100ms, bench::ReadMode::AdaptiveSleep};
    } else if (auto m = bench::parse_read_mode(a.mode)) {
        modes = {*m};
    } else {
        throw UsageError("unknown read mode '" + a.mode + "'");
    }
    const auto schedule =
        bench::make_read_schedule(a.packets ? a.packets : 100, a.gap_ms > 0 ? a.gap_ms : 20.0, a.seed);
    std::vector<bench::ReadBenchResult> results;
    for (auto m : modes) {
        bench::ReadBenchOptions o;
        o.mode = m;
        o.schedule_ns = schedule;
        o.idle_tail = std::chrono::milliseconds(a.idle_ms);
        results.push_back(bench::bench_read_modes(o));
    }
    out << bench::format_read_report(results);
    return kExitOk;
}

} // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"flowlens: on-device network measurement relay", "flowlens"};
    app.require_subcommand(1);
    app.fallthrough();

    Settings s;
    ConfigKeys keys;
    std::string config_path;
    app.add_option("--config", config_path, "Flat key=value config file; flags override its keys");

    auto add_tunnel = [&](CLI::App* sub) {
        keys.bind("tunnel", sub->add_option("--tunnel", s.tunnel, "Tunnel backend")->check(CLI::IsMember({"mem", "tun"})));
        keys.bind("ifname", sub->add_option("--ifname", s.ifname, "TUN interface name"));
        keys.bind("mark", sub->add_option("--mark", s.mark, "Socket mark that bypasses the tunnel route"));
    };
    auto add_store = [&](CLI::App* sub) {
        keys.bind("log", sub->add_option("--log", s.log, "Record log path (appended)"));
        keys.bind("salt", sub->add_option("--salt", s.salt, "Hex salt for the device id digest"));
        keys.bind("threshold-error", sub->add_option("--threshold-error", s.threshold_error));
        keys.bind("threshold-dns", sub->add_option("--threshold-dns", s.threshold_dns));
        keys.bind("threshold-tcp", sub->add_option("--threshold-tcp", s.threshold_tcp));
        keys.bind("network-type", sub->add_option("--network-type", s.network_type, "Label stored with records"));
        keys.bind("network-label", sub->add_option("--network-label", s.network_label, "Carrier or SSID label"));
        keys.bind("device-id", sub->add_option("--device-id", s.device_id, "Defaults to the host name"));
    };
    auto add_timeouts = [&](CLI::App* sub) {
        keys.bind("timeout-connect", sub->add_option("--timeout-connect", s.timeout_connect_ms, "Milliseconds"));
        keys.bind("timeout-dns", sub->add_option("--timeout-dns", s.timeout_dns_ms, "Milliseconds"));
    };

    keys.declare("tunnel", [&](const std::string& v) {
        if (v != "mem" && v != "tun") throw std::invalid_argument(v);
        s.tunnel = v;
    });
    keys.declare("ifname", [&](const std::string& v) { s.ifname = v; });
    keys.declare("mark", [&](const std::string& v) { s.mark = to_u32(v); });
    keys.declare("log", [&](const std::string& v) { s.log = v; });
    keys.declare("salt", [&](const std::string& v) { s.salt = v; });
    keys.declare("threshold-error", [&](const std::string& v) { s.threshold_error = to_u32(v); });
    keys.declare("threshold-dns", [&](const std::string& v) { s.threshold_dns = to_u32(v); });
    keys.declare("threshold-tcp", [&](const std::string& v) { s.threshold_tcp = to_u32(v); });
    keys.declare("min-count", [&](const std::string& v) { s.min_count = to_u32(v); });
    keys.declare("timeout-connect", [&](const std::string& v) { s.timeout_connect_ms = to_u32(v); });
    keys.declare("timeout-dns", [&](const std::string& v) { s.timeout_dns_ms = to_u32(v); });
    keys.declare("network-type", [&](const std::string& v) { s.network_type = v; });
    keys.declare("network-label", [&](const std::string& v) { s.network_label = v; });
    keys.declare("device-id", [&](const std::string& v) { s.device_id = v; });

    auto* run = app.add_subcommand("run", "Relay traffic until interrupted");
    add_tunnel(run);
    add_store(run);
    add_timeouts(run);
    bool selftest = false;
    std::uint64_t rounds = 0;
    std::uint32_t interval_ms = 200;
    run->add_flag("--selftest", selftest, "Drive a built-in client/server pair over the in-memory tunnel");
    run->add_option("--rounds", rounds, "Selftest rounds before stopping on its own (0: until interrupted)");
    run->add_option("--interval", interval_ms, "Milliseconds between selftest rounds");

    auto* replay = app.add_subcommand("replay", "Replay a trace through a fresh relay");
    std::string trace_path;
    replay->add_option("trace", trace_path, "Trace file")->required();
    add_store(replay);
    add_timeouts(replay);

    auto* analyze = app.add_subcommand("analyze", "Reports over a record log");
    AnalyzeArgs aa;
    analyze->add_option("log", aa.path, "Record log")->required();
    analyze->add_option("--report", aa.report, "Report")->check(CLI::IsMember({"apps", "dns", "cdf", "isps"}));
    keys.bind("min-count", analyze->add_option("--min-count", s.min_count, "Smallest group reported"));
    analyze->add_option("--kind", aa.kind, "Record kind filter")->check(CLI::IsMember({"tcp", "dns", "all"}));
    analyze->add_option("--app", aa.app, "Only this app");
    analyze->add_option("--network-type", aa.network_type, "Only this network type");

    auto* exp = app.add_subcommand("export", "Write a record log as one JSON batch");
    std::string export_in;
    std::string export_out;
    exp->add_option("log", export_in, "Record log")->required();
    exp->add_option("--out", export_out, "Output file (default standard output)");

    auto* bench = app.add_subcommand("bench", "Microbenchmarks");
    bench->require_subcommand(1);
    BenchArgs ba;
    auto* bw = bench->add_subcommand("write", "Tunnel write schemes");
    bw->add_option("--scheme", ba.scheme, "direct, plain, counter or all");
    bw->add_option("--packets", ba.packets, "Trace length (default 10000)");
    bw->add_option("--gap-ms", ba.gap_ms, "Mean inter-arrival gap (default 1)");
    bw->add_option("--seed", ba.seed);
    bw->add_option("--contenders", ba.contenders, "CPU-burning threads");
    bw->add_option("--write-cost-us", ba.write_cost_us, "Busy time per tunnel write");
    auto* bm = bench->add_subcommand("map", "Eager vs lazy app mapping");
    bm->add_option("--n", ba.n, "Flows in the burst");
    bm->add_option("--mode", ba.mode, "eager, lazy or all");
    bm->add_option("--parse-cost-ms", ba.parse_cost_ms, "Cost of one socket table parse");
    bm->add_option("--window-ms", ba.window_ms, "Connect completions spread over this window");
    bm->add_option("--seed", ba.seed);
    auto* br = bench->add_subcommand("read", "Blocking vs polling tunnel reads");
    br->add_option("--mode", ba.mode, "blocking, sleep100, adaptive or all");
    br->add_option("--packets", ba.packets, "Packets in the schedule (default 100)");
    br->add_option("--gap-ms", ba.gap_ms, "Mean gap (default 20)");
    br->add_option("--idle-ms", ba.idle_ms, "Quiet tail before shutdown");
    br->add_option("--seed", ba.seed);

    auto* trace_cmd = app.add_subcommand("trace", "Trace utilities");
    trace_cmd->group("");
    trace_cmd->require_subcommand(1);
    auto* sample = trace_cmd->add_subcommand("sample", "Write the bundled sample trace");
    std::string sample_out;
    sample->add_option("--out", sample_out)->required();

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return kExitOk;
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) {
            out << app.help();
            return kExitOk;
        }
        err << "flowlens: " << e.what() << '\n';
        return kExitUsage;
    }

    try {
        if (!config_path.empty()) keys.apply_file(config_path);
        if (run->parsed()) return cmd_run(s, selftest, rounds, interval_ms, out, err);
        if (replay->parsed()) return cmd_replay(s, trace_path, out, err);
        if (analyze->parsed()) return cmd_analyze(s, aa, out, err);
        if (exp->parsed()) return cmd_export(export_in, export_out, out, err);
        if (bw->parsed()) return cmd_bench_write(ba, out);
        if (bm->parsed()) return cmd_bench_map(ba, out);
        if (br->parsed()) return cmd_bench_read(ba, out);
        if (sample->parsed()) {
            save_trace(sample_out, make_sample_trace());
            return kExitOk;
        }
    } catch (const UsageError& e) {
        err << "flowlens: " << e.what() << '\n';
        return kExitUsage;
    } catch (const TraceError& e) {
        err << "flowlens: " << e.what() << '\n';
        return kExitUsage;
    }
    return kExitUsage;
}

} // namespace flowlens::cli
