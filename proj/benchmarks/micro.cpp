// SPDX-License-Identifier: Apache-2.0

#include <benchmark/benchmark.h>

#include <random>
#include <thread>

#include "flowlens/analysis.hpp"
#include "flowlens/appmap.hpp"
#include "flowlens/packet.hpp"
#include "flowlens/tunnel.hpp"

namespace flowlens {
namespace {

TcpSegment data_segment(std::size_t len) {
    TcpSegment s;
    s.src_port = 40'000;
    s.dst_port = 443;
    s.seq = 1000;
    s.ack = 2000;
    s.flags.ack = true;
    s.flags.psh = true;
    s.window = 65535;
    s.payload = Bytes(len, 0x5a);
    return s;
}

const Ipv4Addr kSrc(10, 0, 0, 2);
const Ipv4Addr kDst(93, 184, 216, 34);

void BM_Checksum(benchmark::State& state) {
    const Bytes b(static_cast<std::size_t>(state.range(0)), 0xab);
    for (auto _ : state) benchmark::DoNotOptimize(internet_checksum(b));
    state.SetBytesProcessed(static_cast<std::int64_t>(state.iterations()) * state.range(0));
}
BENCHMARK(BM_Checksum)->Arg(40)->Arg(1500)->Arg(65535);

void BM_SerializeTcp(benchmark::State& state) {
    const IpPacket ip = make_tcp_packet(kSrc, kDst, data_segment(static_cast<std::size_t>(state.range(0))));
    for (auto _ : state) benchmark::DoNotOptimize(serialize_ipv4(ip));
}
BENCHMARK(BM_SerializeTcp)->Arg(0)->Arg(1460);

void BM_ParseTcp(benchmark::State& state) {
    const Bytes wire = serialize_ipv4(make_tcp_packet(kSrc, kDst, data_segment(static_cast<std::size_t>(state.range(0)))));
    for (auto _ : state) {
        const IpPacket ip = parse_ipv4(wire);
        benchmark::DoNotOptimize(parse_tcp(ip));
    }
}
BENCHMARK(BM_ParseTcp)->Arg(0)->Arg(1460);

void BM_ParseSocketTable(benchmark::State& state) {
    std::vector<SocketTableEntry> rows(static_cast<std::size_t>(state.range(0)));
    std::uint64_t inode = 10'000;
    for (auto& r : rows) {
        r.local_addr = Ipv4Addr(10, 0, 0, 2);
        r.local_port = static_cast<std::uint16_t>(30'000 + inode % 20'000);
        r.remote_addr = kDst;
        r.remote_port = 443;
        r.owner_uid = 10'000 + static_cast<std::int64_t>(inode % 50);
        r.inode = inode++;
    }
    const std::string text = format_socket_table(rows);
    for (auto _ : state) benchmark::DoNotOptimize(parse_socket_table(text));
}
BENCHMARK(BM_ParseSocketTable)->Arg(50)->Arg(500);

void BM_WriteQueueRoundTrip(benchmark::State& state) {
    const auto scheme = state.range(0) == 0 ? WriteScheme::QueueWritePlain : WriteScheme::QueueWriteCounter;
    WriteQueue q(scheme);
    std::thread writer([&] {
        while (q.dequeue()) {
        }
    });
    const Bytes pkt(60, 1);
    for (auto _ : state) benchmark::DoNotOptimize(q.enqueue(pkt));
    q.close();
    writer.join();
    state.SetLabel(scheme == WriteScheme::QueueWritePlain ? "plain" : "counter");
}
BENCHMARK(BM_WriteQueueRoundTrip)->Arg(0)->Arg(1)->UseRealTime();

void BM_Median(benchmark::State& state) {
    std::mt19937 rng(1);
    std::vector<std::int64_t> v(static_cast<std::size_t>(state.range(0)));
    for (auto& x : v) x = static_cast<std::int64_t>(rng() % 500'000);
    for (auto _ : state) benchmark::DoNotOptimize(median(RttSeries::from_unsorted("x", v)));
}
BENCHMARK(BM_Median)->Arg(1000)->Arg(100'000);

} // namespace
} // namespace flowlens

BENCHMARK_MAIN();
