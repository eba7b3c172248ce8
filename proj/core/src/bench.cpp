// SPDX-License-Identifier: Apache-2.0

#include "flowlens/bench.hpp"

#include <algorithm>
#include <atomic>
#include <mutex>
#include <random>
#include <sstream>
#include <thread>

#include "flowlens/analysis.hpp"
#include "flowlens/instrument.hpp"

namespace flowlens::bench {

namespace {

const Ipv4Addr kRemote(93, 184, 216, 34);
const Ipv4Addr kLocal(10, 0, 0, 2);

void busy_for(std::chrono::microseconds d) {
    const Clock& c = steady_clock();
    const std::int64_t until = c.now_ns() + std::chrono::nanoseconds(d).count();
    while (c.now_ns() < until) {
    }
}

// Tunnel stand-in whose writes cost a fixed amount of CPU.
class CostlySink {
public:
    explicit CostlySink(std::chrono::microseconds cost) : cost_(cost) {}
    void write(ByteView) {
        busy_for(cost_);
        written_.fetch_add(1, std::memory_order_relaxed);
    }
    std::uint64_t written() const { return written_.load(); }

private:
    std::chrono::microseconds cost_;
    std::atomic<std::uint64_t> written_{0};
};

std::vector<std::int64_t> exponential_offsets(std::size_t n, double mean_gap_ms, std::mt19937_64& rng) {
    std::exponential_distribution<double> gap(1.0 / (mean_gap_ms * 1e6));
    std::vector<std::int64_t> out;
    out.reserve(n);
    double t = 0;
    for (std::size_t i = 0; i < n; ++i) {
        t += gap(rng);
        out.push_back(static_cast<std::int64_t>(t));
    }
    return out;
}

std::string fmt(double v) {
    std::ostringstream os;
    os.precision(6);
    os << v;
    return os.str();
}

double median_of(std::vector<double> v) {
    if (v.empty()) return 0.0;
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : (v[n / 2 - 1] + v[n / 2]) / 2.0;
}

} // namespace

// ---- write paths ----

std::vector<TracePacket> make_write_trace(const WriteTraceSpec& spec) {
    std::mt19937_64 rng(spec.seed);
    const auto offsets = exponential_offsets(spec.packets, spec.mean_gap_ms, rng);
    std::uniform_int_distribution<std::size_t> size(spec.min_payload, std::max(spec.min_payload, spec.max_payload));
    std::vector<TracePacket> out;
    out.reserve(spec.packets);
    for (std::size_t i = 0; i < spec.packets; ++i) {
        UdpDatagram d;
        d.src_port = 443;
        d.dst_port = static_cast<std::uint16_t>(40'000 + i % 1000);
        d.payload.resize(size(rng));
        for (auto& b : d.payload) b = static_cast<std::uint8_t>(rng());
        out.push_back({offsets[i], serialize_ipv4(make_udp_packet(kRemote, kLocal, d))});
    }
    return out;
}

const char* to_string(WriteMode m) {
    switch (m) {
    case WriteMode::DirectWrite: return "direct";
    case WriteMode::QueueWritePlain: return "plain";
    case WriteMode::QueueWriteCounter: return "counter";
    }
    return "?";
}

std::optional<WriteMode> parse_write_mode(std::string_view s) {
    for (auto m : {WriteMode::DirectWrite, WriteMode::QueueWritePlain, WriteMode::QueueWriteCounter}) {
        if (s == to_string(m)) return m;
    }
    return std::nullopt;
}

double WriteBenchResult::fraction_over(double ms) const {
    if (latency_ms.empty()) return 0.0;
    const auto n = std::count_if(latency_ms.begin(), latency_ms.end(), [ms](double x) { return x > ms; });
    return static_cast<double>(n) / static_cast<double>(latency_ms.size());
}

WriteBenchResult bench_write_schemes(std::span<const TracePacket> trace, const WriteBenchOptions& options) {
    WriteBenchResult res;
    res.mode = options.mode;
    if (trace.empty()) return res;

    const Clock& clock = steady_clock();
    CostlySink sink(options.tunnel_write_cost);
    std::mutex tunnel_mu; // one tunnel shared by the direct writers
    const bool direct = options.mode == WriteMode::DirectWrite;
    WriteQueue queue(options.mode == WriteMode::QueueWritePlain ? WriteScheme::QueueWritePlain
                                                                : WriteScheme::QueueWriteCounter,
                     options.spin_threshold);
    std::atomic<bool> done{false};

    std::thread writer;
    if (!direct) {
        writer = std::thread([&] {
            set_worker_role(WorkerRole::TunnelWriter);
            while (auto item = queue.dequeue()) sink.write(item->packet);
        });
    }

    std::vector<std::thread> burners;
    for (std::size_t i = 0; i < options.cpu_contenders; ++i) {
        burners.emplace_back([&] {
            volatile std::uint64_t x = 0;
            while (!done.load(std::memory_order_relaxed)) x = x + 1;
        });
    }

    auto write_one = [&](const Bytes& pkt) -> std::int64_t {
        if (direct) {
            const std::int64_t t0 = clock.now_ns();
            std::lock_guard lk(tunnel_mu);
            sink.write(pkt);
            return clock.now_ns() - t0;
        }
        return queue.enqueue(pkt);
    };

    const std::int64_t start = clock.now_ns() + 5'000'000;
    std::thread contender;
    if (options.contending_producer) {
        contender = std::thread([&] {
            for (const auto& p : trace) {
                // Same rate, shifted by half a mean gap.
                if (done.load()) break;
                sleep_until_ns(start + p.offset_ns + 500'000);
                try {
                    write_one(p.packet);
                } catch (const QueueClosed&) {
                    break;
                }
            }
        });
    }

    res.latency_ms.reserve(trace.size());
    for (const auto& p : trace) {
        sleep_until_ns(start + p.offset_ns);
        res.latency_ms.push_back(static_cast<double>(write_one(p.packet)) / 1e6);
    }

    if (contender.joinable()) contender.join();
    done = true;
    for (auto& t : burners) t.join();
    queue.close();
    if (writer.joinable()) writer.join();

    res.packets_written = sink.written();
    res.queue = queue.stats();
    res.histogram = bucket_histogram(res.latency_ms);
    return res;
}

std::string format_write_table(std::span<const WriteBenchResult> results) {
    std::ostringstream os;
    os << "bucket";
    for (const auto& r : results) os << '\t' << to_string(r.mode);
    os << '\n' << "Total";
    for (const auto& r : results) os << '\t' << r.latency_ms.size();
    os << '\n';
    const auto labels = histogram_labels();
    for (std::size_t b = 0; b < labels.size(); ++b) {
        os << labels[b];
        for (const auto& r : results) os << '\t' << (b < r.histogram.size() ? r.histogram[b] : 0);
        os << '\n';
    }
    os << ">1ms_fraction";
    for (const auto& r : results) os << '\t' << fmt(r.fraction_over(1.0));
    os << '\n';
    return os.str();
}

// ---- mapping ----

const char* to_string(MapMode m) { return m == MapMode::Eager ? "eager" : "lazy"; }

MappingBenchResult bench_mapping(const MappingBenchOptions& options) {
    MappingBenchResult res;
    res.mode = options.mode;
    res.flows = options.flows;
    const std::size_t n = options.flows;
    if (n == 0) return res;

    MockProcSource proc;
    proc.set_parse_cost(options.parse_cost);
    StaticUidResolver names;
    const std::size_t apps = std::max<std::size_t>(1, options.apps);
    for (std::size_t a = 0; a < apps; ++a) {
        names.set(static_cast<std::int64_t>(10'000 + a), "app" + std::to_string(a));
    }
    MappingCoordinator coordinator(proc, names);

    std::mt19937_64 rng(options.seed);
    std::uniform_int_distribution<std::int64_t> arrival(0, std::chrono::nanoseconds(options.burst_window).count());
    std::uniform_int_distribution<std::size_t> app_of(0, apps - 1);
    std::vector<FlowKey> flows(n);
    std::vector<std::int64_t> uid(n);
    std::vector<std::int64_t> offsets(n);
    for (std::size_t i = 0; i < n; ++i) {
        flows[i] = FlowKey{ipproto::kTcp, kLocal, static_cast<std::uint16_t>(30'000 + i),
                           Ipv4Addr(93, 184, static_cast<std::uint8_t>(i / 250), static_cast<std::uint8_t>(i % 250)),
                           443};
        uid[i] = static_cast<std::int64_t>(10'000 + app_of(rng));
        offsets[i] = arrival(rng);
    }

    res.answers.resize(n);
    res.latency_ms.resize(n);
    const Clock& clock = steady_clock();
    const std::int64_t start = clock.now_ns() + 10'000'000;
    std::vector<std::thread> threads;
    threads.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        threads.emplace_back([&, i] {
            set_worker_role(WorkerRole::Bench);
            // The socket exists from the start of the connect.
            proc.add(SocketTable::Tcp, {flows[i].src_addr, flows[i].src_port, flows[i].dst_addr, flows[i].dst_port,
                                        uid[i], 1000 + i});
            sleep_until_ns(start + offsets[i]);
            const std::int64_t done = clock.now_ns();
            res.answers[i] = options.mode == MapMode::Lazy ? coordinator.map_flow(flows[i], done)
                                                           : coordinator.map_eager(flows[i]);
            res.latency_ms[i] = static_cast<double>(clock.now_ns() - done) / 1e6;
        });
    }
    for (auto& t : threads) t.join();

    const MappingStats st = coordinator.stats();
    res.parse_count = st.parses_performed;
    res.mitigation_ratio = 1.0 - static_cast<double>(st.parses_performed) / static_cast<double>(n);

    proc.set_parse_cost(std::chrono::microseconds(0));
    MappingCoordinator oracle(proc, names);
    res.oracle.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        res.oracle.push_back(oracle.map_eager(flows[i]));
        if (res.oracle.back() == res.answers[i]) ++res.matches;
    }
    return res;
}

std::string format_mapping_report(std::span<const MappingBenchResult> results) {
    std::ostringstream os;
    os << "mode\tflows\tparse_count\tmitigation_ratio\tmedian_ms\tp75_ms\tmatches\n";
    for (const auto& r : results) {
        std::vector<double> v = r.latency_ms;
        std::sort(v.begin(), v.end());
        const double p75 = v.empty() ? 0.0 : v[std::min(v.size() - 1, (v.size() * 3) / 4)];
        os << to_string(r.mode) << '\t' << r.flows << '\t' << r.parse_count << '\t' << fmt(r.mitigation_ratio) << '\t'
           << fmt(median_of(r.latency_ms)) << '\t' << fmt(p75) << '\t' << r.matches << '\n';
    }
    return os.str();
}

// ---- reads ----

const char* to_string(ReadMode m) {
    switch (m) {
    case ReadMode::Blocking: return "blocking";
    case ReadMode::FixedSleep100ms: return "sleep100";
    case ReadMode::AdaptiveSleep: return "adaptive";
    }
    return "?";
}

std::optional<ReadMode> parse_read_mode(std::string_view s) {
    for (auto m : {ReadMode::Blocking, ReadMode::FixedSleep100ms, ReadMode::AdaptiveSleep}) {
        if (s == to_string(m)) return m;
    }
    return std::nullopt;
}

std::vector<std::int64_t> make_read_schedule(std::size_t n, double mean_gap_ms, std::uint32_t seed) {
    std::mt19937_64 rng(seed);
    return exponential_offsets(n, mean_gap_ms, rng);
}

double ReadBenchResult::median_ms() const { return median_of(delay_ms); }

ReadBenchResult bench_read_modes(const ReadBenchOptions& options) {
    using namespace std::chrono_literals;
    ReadBenchResult res;
    res.mode = options.mode;
    const Clock& clock = steady_clock();
    auto tunnel = InMemoryTunnel::create();
    auto& ep = *tunnel.relay;
    std::atomic<std::uint64_t> polls{0};
    std::atomic<std::uint64_t> delivered{0};

    std::thread reader([&] {
        set_worker_role(WorkerRole::TunnelReader);
        auto consume = [&](const Bytes& pkt) {
            const std::int64_t now = clock.now_ns();
            if (is_shutdown_dummy(pkt)) {
                res.dummy_seen = true;
                return false;
            }
            const IpPacket ip = parse_ipv4(pkt);
            const UdpDatagram d = parse_udp(ip);
            std::int64_t sent = 0;
            for (int i = 0; i < 8; ++i) sent = (sent << 8) | d.payload[static_cast<std::size_t>(i)];
            res.delay_ms.push_back(static_cast<double>(now - sent) / 1e6);
            ++delivered;
            return true;
        };
        if (options.mode == ReadMode::Blocking) {
            while (auto pkt = ep.read_packet()) {
                if (!consume(*pkt)) return;
            }
            return;
        }
        // Polling readers: sleep, then drain whatever is queued.
        std::chrono::microseconds sleep = 100ms;
        while (true) {
            std::this_thread::sleep_for(sleep);
            ++polls;
            bool got = false;
            while (auto pkt = ep.try_read_packet()) {
                got = true;
                if (!consume(*pkt)) return;
            }
            if (ep.is_closed()) return;
            if (options.mode == ReadMode::AdaptiveSleep) {
                sleep = got ? std::max<std::chrono::microseconds>(1ms, sleep / 2)
                            : std::min<std::chrono::microseconds>(100ms, sleep * 2);
            }
        }
    });

    const std::int64_t start = clock.now_ns() + 20'000'000;
    for (std::int64_t off : options.schedule_ns) {
        sleep_until_ns(start + off);
        UdpDatagram d;
        d.src_port = 40'000;
        d.dst_port = 443;
        const std::int64_t now = clock.now_ns();
        for (int i = 7; i >= 0; --i) d.payload.push_back(static_cast<std::uint8_t>(now >> (8 * i)));
        tunnel.app->write_packet(serialize_ipv4(make_udp_packet(kLocal, kRemote, d)));
    }
    // Let the last packet be read before the quiet period starts.
    const auto settle_deadline = clock.now_ns() + 1'000'000'000;
    while (delivered.load() < options.schedule_ns.size() && clock.now_ns() < settle_deadline) {
        std::this_thread::sleep_for(1ms);
    }
    std::this_thread::sleep_for(options.idle_tail);
    res.wakeups_before_stop = options.mode == ReadMode::Blocking ? ep.inbound().wakeups() : polls.load();
    ep.inject_dummy();
    reader.join();
    res.packets = delivered.load();
    res.wakeups_total = options.mode == ReadMode::Blocking ? ep.inbound().wakeups() : polls.load();
    return res;
}

std::string format_read_report(std::span<const ReadBenchResult> results) {
    std::ostringstream os;
    os << "mode\tpackets\tmedian_ms\tmax_ms\twakeups\n";
    for (const auto& r : results) {
        const double mx = r.delay_ms.empty() ? 0.0 : *std::max_element(r.delay_ms.begin(), r.delay_ms.end());
        os << to_string(r.mode) << '\t' << r.packets << '\t' << fmt(r.median_ms()) << '\t' << fmt(mx) << '\t'
           << r.wakeups_total << '\n';
    }
    return os.str();
}

} // namespace flowlens::bench
