// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <numeric>

#include "flowlens/bench.hpp"

namespace flowlens::bench {
namespace {

using namespace std::chrono_literals;

std::uint64_t sum(const std::vector<std::uint64_t>& v) { return std::accumulate(v.begin(), v.end(), std::uint64_t{0}); }

// --- write schemes ------------------------------------------------------------

TEST(WriteTrace, SeededTracesAreIdentical) {
    WriteTraceSpec s;
    s.packets = 500;
    s.seed = 9;
    const auto a = make_write_trace(s);
    const auto b = make_write_trace(s);
    ASSERT_EQ(a.size(), 500u);
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(a[i].offset_ns, b[i].offset_ns);
        EXPECT_EQ(a[i].packet, b[i].packet);
        if (i > 0) EXPECT_GE(a[i].offset_ns, a[i - 1].offset_ns);
    }
    s.seed = 10;
    EXPECT_NE(make_write_trace(s)[0].offset_ns, a[0].offset_ns);
}

TEST(WriteBench, EmptyTraceGivesEmptyHistogram) {
    const auto r = bench_write_schemes({}, {});
    EXPECT_TRUE(r.histogram.empty());
    EXPECT_TRUE(r.latency_ms.empty());
    EXPECT_EQ(r.fraction_over(1.0), 0.0);
}

TEST(WriteBench, EveryModeConservesCountsAndDeliversEverything) {
    WriteTraceSpec s;
    s.packets = 400;
    s.mean_gap_ms = 0.5;
    const auto trace = make_write_trace(s);
    for (auto mode : {WriteMode::DirectWrite, WriteMode::QueueWritePlain, WriteMode::QueueWriteCounter}) {
        WriteBenchOptions o;
        o.mode = mode;
        const auto r = bench_write_schemes(trace, o);
        EXPECT_EQ(r.latency_ms.size(), trace.size()) << to_string(mode);
        EXPECT_EQ(sum(r.histogram), trace.size()) << to_string(mode);
        // Measured producer plus the contending one.
        EXPECT_EQ(r.packets_written, 2 * trace.size()) << to_string(mode);
        if (mode != WriteMode::DirectWrite) EXPECT_EQ(r.queue.enqueued, r.queue.dequeued);
    }
}

TEST(WriteBench, QueueingNeverHasMoreSlowWritesThanDirect) {
    WriteTraceSpec s;
    s.packets = 300;
    s.mean_gap_ms = 5.0;
    s.seed = 3;
    const auto trace = make_write_trace(s);
    WriteBenchOptions o;
    o.tunnel_write_cost = 2ms; // direct writers queue behind each other
    o.mode = WriteMode::DirectWrite;
    const auto direct = bench_write_schemes(trace, o);
    o.mode = WriteMode::QueueWriteCounter;
    const auto counter = bench_write_schemes(trace, o);
    EXPECT_LE(counter.histogram[3] + counter.histogram[4], direct.histogram[3] + direct.histogram[4]);
    EXPECT_GT(direct.fraction_over(1.0), counter.fraction_over(1.0));
}

TEST(WriteBench, ModeNamesRoundTrip) {
    for (auto m : {WriteMode::DirectWrite, WriteMode::QueueWritePlain, WriteMode::QueueWriteCounter}) {
        EXPECT_EQ(parse_write_mode(to_string(m)), m);
    }
    EXPECT_FALSE(parse_write_mode("fast"));
}

TEST(WriteBench, TableHasTotalsAndBuckets) {
    WriteBenchResult r;
    r.mode = WriteMode::QueueWritePlain;
    r.latency_ms = {0.5, 1.5};
    r.histogram = {1, 1, 0, 0, 0};
    const std::vector<WriteBenchResult> rs{r};
    EXPECT_EQ(format_write_table(rs),
              "bucket\tplain\nTotal\t2\n0-1ms\t1\n1-2ms\t1\n2-5ms\t0\n5-10ms\t0\n>10ms\t0\n>1ms_fraction\t0.5\n");
}

// --- mapping ------------------------------------------------------------------

TEST(MappingBench, SingleFlowParsesOnceInBothModes) {
    for (auto mode : {MapMode::Eager, MapMode::Lazy}) {
        MappingBenchOptions o;
        o.flows = 1;
        o.mode = mode;
        const auto r = bench_mapping(o);
        EXPECT_EQ(r.parse_count, 1u) << to_string(mode);
        EXPECT_EQ(r.matches, 1u);
    }
}

TEST(MappingBench, LazyBurstParsesLessAndAgreesWithOracle) {
    MappingBenchOptions o;
    o.flows = 481;
    const auto lazy = bench_mapping(o);
    o.mode = MapMode::Eager;
    const auto eager = bench_mapping(o);
    EXPECT_EQ(eager.parse_count, 481u);
    EXPECT_LT(lazy.parse_count, 481u);
    EXPECT_LE(lazy.parse_count, eager.parse_count);
    EXPECT_GE(lazy.mitigation_ratio, 0.5);
    EXPECT_EQ(lazy.matches, 481u);
    EXPECT_EQ(eager.matches, 481u);
    for (const auto& a : lazy.answers) EXPECT_NE(a.uid, -1);
}

TEST(MappingBench, LazyNeverParsesMoreAcrossSeeds) {
    for (std::uint32_t seed = 1; seed <= 4; ++seed) {
        MappingBenchOptions o;
        o.flows = 60;
        o.seed = seed;
        o.burst_window = 100ms;
        const auto lazy = bench_mapping(o);
        EXPECT_LE(lazy.parse_count, 60u);
        EXPECT_EQ(lazy.matches, 60u);
    }
}

TEST(MappingBench, EmptyBurst) {
    MappingBenchOptions o;
    o.flows = 0;
    const auto r = bench_mapping(o);
    EXPECT_EQ(r.parse_count, 0u);
    EXPECT_TRUE(r.answers.empty());
}

// --- reads --------------------------------------------------------------------

TEST(ReadBench, BlockingBeatsFixedSleep) {
    const auto schedule = make_read_schedule(30, 20.0, 5);
    ReadBenchOptions o;
    o.schedule_ns = schedule;
    const auto blocking = bench_read_modes(o);
    o.mode = ReadMode::FixedSleep100ms;
    const auto sleepy = bench_read_modes(o);
    EXPECT_EQ(blocking.packets, 30u);
    EXPECT_EQ(sleepy.packets, 30u);
    EXPECT_LT(blocking.median_ms(), sleepy.median_ms());
    EXPECT_EQ(blocking.wakeups_total, blocking.packets + 1);
    EXPECT_TRUE(blocking.dummy_seen);
    EXPECT_TRUE(sleepy.dummy_seen);
}

TEST(ReadBench, SinglePacketUnderFixedSleepWaitsAtMostOnePeriod) {
    ReadBenchOptions o;
    o.mode = ReadMode::FixedSleep100ms;
    o.schedule_ns = {0};
    const auto r = bench_read_modes(o);
    ASSERT_EQ(r.delay_ms.size(), 1u);
    EXPECT_LE(r.delay_ms[0], 110.0);
}

TEST(ReadBench, AdaptiveDeliversEverything) {
    ReadBenchOptions o;
    o.mode = ReadMode::AdaptiveSleep;
    o.schedule_ns = make_read_schedule(40, 2.0, 6);
    const auto r = bench_read_modes(o);
    EXPECT_EQ(r.packets, 40u);
    EXPECT_GT(r.wakeups_total, 0u);
}

TEST(ReadBench, IdleBlockingReaderNeverWakes) {
    ReadBenchOptions o;
    o.idle_tail = 1s;
    const auto r = bench_read_modes(o);
    EXPECT_EQ(r.packets, 0u);
    EXPECT_EQ(r.wakeups_before_stop, 0u);
    EXPECT_EQ(r.wakeups_total, 1u); // the shutdown dummy
}

TEST(ReadBench, ModeNamesRoundTrip) {
    for (auto m : {ReadMode::Blocking, ReadMode::FixedSleep100ms, ReadMode::AdaptiveSleep}) {
        EXPECT_EQ(parse_read_mode(to_string(m)), m);
    }
    EXPECT_FALSE(parse_read_mode("spin"));
}

} // namespace
} // namespace flowlens::bench
