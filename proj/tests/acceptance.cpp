// SPDX-License-Identifier: Apache-2.0
//
// Acceptance gate: one test per criterion, each summarized as a single
// PASS/FAIL line at the end of the run.

#include <gtest/gtest.h>

#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <map>
#include <numeric>
#include <set>

#include "flowlens/analysis.hpp"
#include "flowlens/bench.hpp"
#include "flowlens/store.hpp"
#include "generators.hpp"
#include "process.hpp"
#include "support.hpp"
#include "tcp_reference.hpp"

namespace flowlens {
namespace {

namespace fs = std::filesystem;
using namespace std::chrono_literals;
using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

class ScratchDir {
public:
    ScratchDir() {
        std::string tmpl = (fs::temp_directory_path() / "flowlens-accept-XXXXXX").string();
        if (!::mkdtemp(tmpl.data())) throw std::runtime_error("mkdtemp");
        path_ = tmpl;
    }
    ~ScratchDir() {
        std::error_code ec;
        fs::remove_all(path_, ec);
    }
    std::string file(const std::string& name) const { return (path_ / name).string(); }

private:
    fs::path path_;
};

// Nearest-rank percentile.
std::int64_t percentile(std::vector<std::int64_t> v, double p) {
    std::sort(v.begin(), v.end());
    const auto rank = static_cast<std::size_t>(std::ceil(p * static_cast<double>(v.size())));
    return v[std::clamp<std::size_t>(rank, 1, v.size()) - 1];
}

// ---------------------------------------------------------------------------------------

TEST(Acceptance, C01_SpliceCorrectness) {
    const auto t0 = Clock::now();
    TcpEchoServer server;
    for (std::size_t n : {std::size_t{0}, std::size_t{1}, std::size_t{1460}, std::size_t{1461}, std::size_t{65535},
                          std::size_t{1} << 20}) {
        testing::RelayHarness h;
        const Bytes payload = testing::random_bytes(n, static_cast<std::uint32_t>(n) + 11);
        const auto out = testing::echo_through(*h.host, server.endpoint(), payload);
        ASSERT_TRUE(out.connected) << n;
        EXPECT_TRUE(out.echoed == payload) << n << " bytes: got " << out.echoed.size();
        EXPECT_TRUE(out.closed) << n;
        EXPECT_TRUE(h.wait_flows_empty()) << n;
    }
    EXPECT_LT(seconds_since(t0), 30.0);
}

TEST(Acceptance, C02_RttAccuracyUnderInjectedDelay) {
    const auto t0 = Clock::now();
    TcpEchoServer server;
    for (int d_ms : {5, 20, 50, 200}) {
        const std::int64_t d_us = d_ms * 1000;
        DelayingSocketApi shim(posix_sockets(), std::chrono::milliseconds(d_ms));
        testing::HarnessOptions o;
        o.sockets = &shim;
        testing::RelayHarness h(o);
        std::vector<std::int64_t> dev;
        for (int i = 0; i < 100; ++i) {
            auto c = h.host->connect(server.endpoint(), 5s);
            ASSERT_TRUE(c) << "D=" << d_ms << " trial " << i;
            ASSERT_TRUE(h.sink.wait_for(static_cast<std::size_t>(i) + 1, 5s));
            const auto r = h.sink.records().back();
            ASSERT_EQ(r.outcome, Outcome::Success);
            dev.push_back(std::abs(*r.rtt_us - d_us));
            c->shutdown_write();
            c->wait_closed(2s);
        }
        const auto p95 = percentile(dev, 0.95);
        const auto p100 = percentile(dev, 1.0);
        std::printf("  D=%dms |err| p95=%lldus max=%lldus\n", d_ms, static_cast<long long>(p95),
                    static_cast<long long>(p100));
        EXPECT_LE(p95, 1000) << "D=" << d_ms;
        EXPECT_LE(p100, 2000) << "D=" << d_ms;
    }
    EXPECT_LT(seconds_since(t0), 300.0);
}

TEST(Acceptance, C03_DnsTiming) {
    DnsResponder::Options ro;
    ro.delay = 30ms;
    DnsResponder dns(ro);
    testing::HarnessOptions o;
    o.engine.dns_port = dns.endpoint().port;
    testing::RelayHarness h(o);
    auto s = h.host->udp();
    std::vector<std::int64_t> rtts;
    for (int i = 0; i < 50; ++i) {
        s->send_to(dns.endpoint(), build_dns_query(static_cast<std::uint16_t>(0x2000 + i), "example.com"));
        ASSERT_TRUE(s->recv(2s)) << i;
        ASSERT_TRUE(h.sink.wait_for(static_cast<std::size_t>(i) + 1, 2s));
        rtts.push_back(*h.sink.records().back().rtt_us);
    }
    const auto med = percentile(rtts, 0.5);
    std::printf("  median dns rtt %lldus\n", static_cast<long long>(med));
    EXPECT_GE(med, 28'000);
    EXPECT_LE(med, 32'000);

    // A reply with the wrong transaction id arrives 10 ms early and must not end the clock.
    DnsResponder::Options wo;
    wo.delay = 30ms;
    wo.wrong_txn_first = true;
    DnsResponder tricky(wo);
    testing::HarnessOptions o2;
    o2.engine.dns_port = tricky.endpoint().port;
    testing::RelayHarness h2(o2);
    auto s2 = h2.host->udp();
    for (int i = 0; i < 10; ++i) {
        s2->send_to(tricky.endpoint(), build_dns_query(static_cast<std::uint16_t>(0x3000 + i), "example.com"));
        ASSERT_TRUE(s2->recv(2s));
        ASSERT_TRUE(s2->recv(2s));
        ASSERT_TRUE(h2.sink.wait_for(static_cast<std::size_t>(i) + 1, 2s));
        EXPECT_GE(*h2.sink.records().back().rtt_us, 28'000) << i;
    }
    EXPECT_EQ(h2.sink.size(), 10u);
}

bool decodes(ByteView wire) {
    try {
        const IpPacket ip = parse_ipv4(wire);
        if (ip.protocol == ipproto::kTcp) parse_tcp(ip);
        if (ip.protocol == ipproto::kUdp) parse_udp(ip);
        return true;
    } catch (const CodecException&) {
        return false;
    }
}

TEST(Acceptance, C04_CodecProperties) {
    testing::Gen g(404);
    for (int i = 0; i < 10'000; ++i) {
        const IpPacket ip = g.packet();
        const Bytes wire = serialize_ipv4(ip);
        ASSERT_EQ(parse_ipv4(wire), ip) << i;
        if (ip.protocol == ipproto::kTcp) ASSERT_EQ(serialize_tcp(parse_tcp(ip), ip.src, ip.dst), ip.payload);
        if (ip.protocol == ipproto::kUdp) ASSERT_EQ(serialize_udp(parse_udp(ip), ip.src, ip.dst), ip.payload);
    }
    std::size_t flips = 0;
    for (int i = 0; i < 500; ++i) {
        const auto proto = i % 2 == 0 ? ipproto::kTcp : ipproto::kUdp;
        const IpPacket ip = g.transport_packet(proto);
        const Bytes wire = serialize_ipv4(ip);
        const std::size_t ihl = ip.header_length_bytes();
        const std::size_t thl = proto == ipproto::kTcp ? (wire[ihl + 12] >> 4) * 4u : kUdpHeader;
        for (std::size_t bit = 0; bit < (ihl + thl) * 8; ++bit) {
            Bytes bad = wire;
            bad[bit / 8] ^= static_cast<std::uint8_t>(0x80 >> (bit % 8));
            // On IPv4 a zero UDP checksum means "not computed".
            if (proto == ipproto::kUdp && bit / 8 >= ihl + 6 && load_be16(bad, ihl + 6) == 0) continue;
            ASSERT_FALSE(decodes(bad)) << "packet " << i << " bit " << bit;
            ++flips;
        }
    }
    EXPECT_GT(flips, 100'000u);
}

TEST(Acceptance, C05_TcpMachineConformance) {
    std::size_t total = 0;
    std::set<TcpState> covered;
    for (const auto& start : tcpref::starts()) {
        tcpref::World w;
        w.trace = start.name;
        start.setup(w);
        ASSERT_FALSE(HasFatalFailure()) << start.name;
        covered.insert(w.impl.state());
        total += tcpref::explore(w, 6);
        ASSERT_FALSE(HasFatalFailure()) << start.name;
    }
    EXPECT_EQ(covered.size(), 6u);
    EXPECT_EQ(total, tcpref::starts().size() * 19'531u);
}

TEST(Acceptance, C06_LazyMapping) {
    bench::MappingBenchOptions o;
    o.flows = 481;
    o.parse_cost = 5ms;
    o.mode = bench::MapMode::Lazy;
    const auto lazy = bench::bench_mapping(o);
    o.mode = bench::MapMode::Eager;
    const auto eager = bench::bench_mapping(o);
    std::printf("  lazy parse_count=%llu mitigation=%.3f\n", static_cast<unsigned long long>(lazy.parse_count),
                lazy.mitigation_ratio);
    EXPECT_LT(lazy.parse_count, 481u);
    EXPECT_GE(lazy.mitigation_ratio, 0.5);
    EXPECT_EQ(lazy.matches, 481u);
    ASSERT_EQ(lazy.answers.size(), 481u);
    EXPECT_EQ(lazy.answers, eager.answers);
    EXPECT_EQ(lazy.answers, lazy.oracle);
}

TEST(Acceptance, C07_WriteSchemeOrdering) {
    bench::WriteTraceSpec spec;
    spec.packets = 10'000;
    spec.seed = 7;
    const auto trace = bench::make_write_trace(spec);
    int wins = 0;
    for (int run = 0; run < 10; ++run) {
        bench::WriteBenchOptions o;
        o.mode = bench::WriteMode::QueueWritePlain;
        const auto plain = bench::bench_write_schemes(trace, o);
        o.mode = bench::WriteMode::QueueWriteCounter;
        const auto counter = bench::bench_write_schemes(trace, o);
        for (const auto* r : {&plain, &counter}) {
            EXPECT_EQ(std::accumulate(r->histogram.begin(), r->histogram.end(), std::uint64_t{0}), trace.size());
            EXPECT_EQ(r->latency_ms.size(), trace.size());
        }
        const double fp = plain.fraction_over(1.0);
        const double fc = counter.fraction_over(1.0);
        std::printf("  run %d: plain %.5f counter %.5f\n", run, fp, fc);
        wins += fc < fp ? 1 : 0;
    }
    EXPECT_GE(wins, 9);
}

TEST(Acceptance, C08_BlockingReads) {
    const auto schedule = bench::make_read_schedule(100, 20.0, 8);
    bench::ReadBenchOptions o;
    o.schedule_ns = schedule;
    o.mode = bench::ReadMode::Blocking;
    const auto blocking = bench::bench_read_modes(o);
    o.mode = bench::ReadMode::FixedSleep100ms;
    const auto sleepy = bench::bench_read_modes(o);
    std::printf("  median blocking %.3fms sleep100 %.3fms\n", blocking.median_ms(), sleepy.median_ms());
    EXPECT_EQ(blocking.packets, 100u);
    EXPECT_EQ(sleepy.packets, 100u);
    EXPECT_LT(blocking.median_ms(), sleepy.median_ms());
    EXPECT_EQ(blocking.wakeups_total, blocking.packets + 1);

    bench::ReadBenchOptions idle;
    idle.mode = bench::ReadMode::Blocking;
    idle.idle_tail = 5s;
    const auto quiet = bench::bench_read_modes(idle);
    EXPECT_EQ(quiet.wakeups_before_stop, 0u);
}

// Class plus identifying tuple, from record fields.
using OracleKey = std::tuple<int, std::int64_t, std::string, std::string>;

OracleKey oracle_key(const MeasurementRecord& r) {
    if (r.outcome != Outcome::Success) return {0, r.app.uid, r.app.name, to_string(r.outcome)};
    if (r.kind == MeasureKind::Dns) return {1, r.app.uid, r.app.name, r.domain};
    return {2, r.app.uid, r.app.name, r.flow.dst_addr.to_string() + ":" + std::to_string(r.flow.dst_port)};
}

TEST(Acceptance, C09_RateLimiting) {
    testing::Gen g(909);
    ScratchDir dir;
    std::array<std::uint64_t, 3> class_seen{};
    for (int round = 0; round < 50; ++round) {
        const LimiterThresholds t{static_cast<std::uint32_t>(g.range(0, 6)), static_cast<std::uint32_t>(g.range(0, 10)),
                                  static_cast<std::uint32_t>(g.range(0, 15))};
        auto cap_of = [&](const OracleKey& k) {
            return std::get<0>(k) == 0 ? t.error : std::get<0>(k) == 1 ? t.dns : t.tcp;
        };
        RecordStore store(dir.file("r" + std::to_string(round) + ".log"), t);
        std::map<OracleKey, std::uint64_t> submitted;
        std::map<OracleKey, std::uint64_t> persisted;
        const std::size_t n = g.range(100, 1000);
        for (std::size_t i = 0; i < n; ++i) {
            // Pull from a small pool so signatures repeat.
            MeasurementRecord r = g.record();
            r.app = {static_cast<std::int64_t>(10'000 + g.range(0, 2)), "app" + std::to_string(g.range(0, 2))};
            r.domain = r.kind == MeasureKind::Dns ? "d" + std::to_string(g.range(0, 2)) + ".example" : "";
            r.flow.dst_port = static_cast<std::uint16_t>(g.range(0, 1) ? 443 : 80);
            r.flow.dst_addr = Ipv4Addr(10, 0, 0, static_cast<std::uint8_t>(g.range(1, 2)));
            const OracleKey k = oracle_key(r);
            ++class_seen[static_cast<std::size_t>(std::get<0>(k))];
            const bool want = persisted[k] < cap_of(k);
            ++submitted[k];
            ASSERT_EQ(store.submit(r), want ? SubmitResult::Persisted : SubmitResult::Suppressed);
            if (want) ++persisted[k];
        }
        for (const auto& [k, c] : submitted) EXPECT_EQ(persisted[k], std::min<std::uint64_t>(c, cap_of(k)));
        const auto& st = store.stats();
        EXPECT_EQ(st.submitted, n);
        EXPECT_EQ(st.persisted + st.suppressed, st.submitted);
    }
    for (auto c : class_seen) EXPECT_GT(c, 0u);
}

// Sort-based oracles.
double sorted_median(std::vector<std::int64_t> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? static_cast<double>(v[n / 2]) : (static_cast<double>(v[n / 2 - 1]) + static_cast<double>(v[n / 2])) / 2.0;
}

CdfCurve sorted_cdf(std::vector<std::int64_t> v) {
    std::sort(v.begin(), v.end());
    CdfCurve out;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i + 1 < v.size() && v[i + 1] == v[i]) continue;
        out.push_back({v[i], static_cast<double>(i + 1) / static_cast<double>(v.size())});
    }
    return out;
}

TEST(Acceptance, C10_AnalysisOracles) {
    testing::Gen g(1010);
    for (int i = 0; i < 10'000; ++i) {
        std::vector<std::int64_t> v(g.range(1, 80));
        const std::size_t spread = g.coin(0.3) ? 4 : 500'000;
        for (auto& x : v) x = static_cast<std::int64_t>(g.range(0, spread));
        const auto s = RttSeries::from_unsorted("x", v);
        ASSERT_DOUBLE_EQ(median(s), sorted_median(v)) << i;
        const auto c = cdf(s);
        const auto want = sorted_cdf(v);
        ASSERT_EQ(c.size(), want.size()) << i;
        for (std::size_t j = 0; j < c.size(); ++j) {
            ASSERT_EQ(c[j].rtt_us, want[j].rtt_us);
            ASSERT_NEAR(c[j].fraction, want[j].fraction, 1e-12);
        }
    }
    for (int i = 0; i < 10'000; ++i) {
        std::vector<MeasurementRecord> recs(g.range(0, 50));
        for (auto& r : recs) r = g.record();
        const std::size_t min_count = g.range(0, 5);
        std::map<std::string, std::vector<std::int64_t>> groups;
        for (const auto& r : recs) {
            if (r.outcome == Outcome::Success) groups[r.app.name].push_back(*r.rtt_us);
        }
        std::vector<std::pair<std::string, std::vector<std::int64_t>>> kept;
        for (auto& [k, v] : groups) {
            if (v.size() >= min_count) kept.emplace_back(k, v);
        }
        const auto rows = group_summary(recs, GroupKey::App, min_count);
        ASSERT_EQ(rows.size(), kept.size()) << i;
        for (const auto& [k, v] : kept) {
            auto it = std::find_if(rows.begin(), rows.end(), [&](const SummaryRow& r) { return r.key == k; });
            ASSERT_NE(it, rows.end());
            ASSERT_EQ(it->count, v.size());
            ASSERT_DOUBLE_EQ(it->median_us, sorted_median(v));
        }
    }

    const auto even = RttSeries::from_unsorted("app", {51'000, 50'000});
    EXPECT_DOUBLE_EQ(round_half_ms(median(even)), 50.5);

    std::vector<double> column;
    column.insert(column.end(), 763, 0.5);
    column.insert(column.end(), 39, 1.5);
    column.insert(column.end(), 7, 3.0);
    column.insert(column.end(), 1, 7.0);
    const auto h = bucket_histogram(column);
    EXPECT_EQ(h, (std::vector<std::uint64_t>{763, 39, 7, 1, 0}));
    EXPECT_EQ(std::accumulate(h.begin(), h.end(), std::uint64_t{0}), 810u);
}

TEST(Acceptance, C11_Shutdown) {
    ScratchDir d;
    const auto log = d.file("run.log");
    testing::ChildProcess p(FLOWLENS_BIN,
                            {"run", "--tunnel", "mem", "--selftest", "--interval", "50", "--log", log},
                            {d.file("out"), d.file("err")});
    std::this_thread::sleep_for(1500ms);
    ASSERT_FALSE(p.wait_for(0ms)) << p.err();
    const auto t0 = Clock::now();
    p.signal(SIGINT);
    const auto code = p.wait_for(10s);
    const double took = seconds_since(t0);
    std::printf("  exited %.3fs after interrupt\n", took);
    ASSERT_TRUE(code) << "did not exit";
    EXPECT_EQ(*code, 0) << p.err();
    EXPECT_LT(took, 2.0);
    LoadResult loaded;
    EXPECT_NO_THROW(loaded = load_records(log));
    EXPECT_GT(loaded.records.size(), 0u);
    const std::string err = p.err();
    const auto at = err.find("dummy_packets=");
    ASSERT_NE(at, std::string::npos) << err;
    EXPECT_GE(std::stoul(err.substr(at + 14)), 1u);
}

// Collects one verdict per criterion test.
class CriterionReporter : public ::testing::EmptyTestEventListener {
public:
    void OnTestEnd(const ::testing::TestInfo& info) override {
        const auto* r = info.result();
        lines_.push_back(std::string(r->Passed() ? "PASS" : "FAIL") + "  " + info.name() + "  (" +
                         std::to_string(static_cast<double>(r->elapsed_time()) / 1000.0) + " s)");
        all_passed_ = all_passed_ && r->Passed();
    }
    void OnTestProgramEnd(const ::testing::UnitTest&) override {
        std::printf("\n==== acceptance ====\n");
        for (const auto& l : lines_) std::printf("%s\n", l.c_str());
        std::printf("==== %s ====\n", all_passed_ ? "ALL PASS" : "FAILURES");
        std::fflush(stdout);
    }

private:
    std::vector<std::string> lines_;
    bool all_passed_ = true;
};

} // namespace
} // namespace flowlens

int main(int argc, char** argv) {
    std::setvbuf(stdout, nullptr, _IOLBF, 0);
    ::testing::InitGoogleTest(&argc, argv);
    ::testing::UnitTest::GetInstance()->listeners().Append(new flowlens::CriterionReporter);
    return RUN_ALL_TESTS();
}
