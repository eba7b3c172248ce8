// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <fcntl.h>
#include <sys/socket.h>

#include <algorithm>
#include <cmath>
#include <mutex>
#include <string>
#include <vector>

#include "flowlens/loopback.hpp"
#include "flowlens/measure.hpp"

namespace flowlens {
namespace {

using namespace std::chrono_literals;

// Shared event log for the clock and socket decorators below.
struct CallLog {
    std::mutex mu;
    std::vector<std::string> events;
    void add(std::string e) {
        std::lock_guard lk(mu);
        events.push_back(std::move(e));
    }
};

class LoggingClock final : public Clock {
public:
    explicit LoggingClock(CallLog& log) : log_(log) {}
    std::int64_t now_ns() const override {
        log_.add("clock");
        return steady_clock().now_ns();
    }

private:
    CallLog& log_;
};

class LoggingSockets final : public ForwardingSocketApi {
public:
    LoggingSockets(SocketApi& inner, CallLog& log) : ForwardingSocketApi(inner), log_(log) {}
    int socket(int d, int t, int p) override {
        log_.add("socket");
        return inner_.socket(d, t, p);
    }
    int connect(int fd, const sockaddr* a, socklen_t l) override {
        log_.add("connect");
        return inner_.connect(fd, a, l);
    }
    int setsockopt(int fd, int level, int name, const void* v, socklen_t l) override {
        log_.add("setsockopt");
        return inner_.setsockopt(fd, level, name, v, l);
    }

private:
    CallLog& log_;
};

std::int64_t percentile(std::vector<std::int64_t> v, double p) {
    std::sort(v.begin(), v.end());
    const auto idx = static_cast<std::size_t>(std::ceil(p * static_cast<double>(v.size()))) - 1;
    return v[std::min(idx, v.size() - 1)];
}

TEST(TimedConnect, ClockReadsSitDirectlyAroundConnect) {
    TcpEchoServer server;
    CallLog log;
    LoggingClock clock(log);
    LoggingSockets sockets(posix_sockets(), log);
    const auto r = timed_connect(sockets, clock, server.endpoint(), 1s);
    ASSERT_EQ(r.timing.outcome, Outcome::Success);
    auto it = std::find(log.events.begin(), log.events.end(), "connect");
    ASSERT_NE(it, log.events.end());
    ASSERT_NE(it, log.events.begin());
    ASSERT_NE(it + 1, log.events.end());
    EXPECT_EQ(*(it - 1), "clock");
    EXPECT_EQ(*(it + 1), "clock");
    EXPECT_EQ(std::count(log.events.begin(), log.events.end(), "clock"), 2);
}

TEST(TimedConnect, ClosedPortIsRefusedWithoutRtt) {
    const auto r = timed_connect(posix_sockets(), steady_clock(), {Ipv4Addr(127, 0, 0, 1), unused_tcp_port()}, 1s);
    EXPECT_EQ(r.timing.outcome, Outcome::Refused);
    EXPECT_FALSE(r.timing.rtt_us);
    EXPECT_EQ(r.error, ECONNREFUSED);
}

// A listener whose accept queue is full drops further SYNs, which looks like
// a black hole to the next connect.
struct FullListener {
    UniqueFd listener;
    std::vector<UniqueFd> fillers;
    Endpoint ep;

    FullListener() {
        listener = UniqueFd(::socket(AF_INET, SOCK_STREAM, 0));
        sockaddr_in sa = to_sockaddr({Ipv4Addr(127, 0, 0, 1), 0});
        ::bind(listener.get(), reinterpret_cast<sockaddr*>(&sa), sizeof sa);
        ::listen(listener.get(), 0);
        socklen_t len = sizeof sa;
        ::getsockname(listener.get(), reinterpret_cast<sockaddr*>(&sa), &len);
        ep = from_sockaddr(sa);
        for (int i = 0; i < 8; ++i) {
            UniqueFd c(::socket(AF_INET, SOCK_STREAM | SOCK_NONBLOCK, 0));
            ::connect(c.get(), reinterpret_cast<sockaddr*>(&sa), sizeof sa);
            fillers.push_back(std::move(c));
        }
        std::this_thread::sleep_for(50ms);
    }
};

TEST(TimedConnect, BlackholeTimesOutAfterTheBudget) {
    FullListener hole;
    const auto start = std::chrono::steady_clock::now();
    const auto r = timed_connect(posix_sockets(), steady_clock(), hole.ep, 200ms);
    const auto took = std::chrono::steady_clock::now() - start;
    EXPECT_EQ(r.timing.outcome, Outcome::Timeout);
    EXPECT_FALSE(r.timing.rtt_us);
    EXPECT_GE(took, 190ms);
    EXPECT_LT(took, 400ms);
}

TEST(TimedConnect, MarkFailureIsReportedAsUnreachable) {
    TcpEchoServer server;
    const auto r = timed_connect(posix_sockets(), steady_clock(), server.endpoint(), 1s,
                                 SocketMark::bind_device("no-such-device0"));
    EXPECT_EQ(r.timing.outcome, Outcome::Unreachable);
    EXPECT_NE(r.error, 0);
}

class InjectedDelay : public ::testing::TestWithParam<int> {};

// The full 100-trial run lives in the acceptance binary; this is a lighter pass.
TEST_P(InjectedDelay, RttTracksTheShimDelay) {
    TcpEchoServer server;
    const std::int64_t d_us = GetParam() * 1000;
    DelayingSocketApi shim(posix_sockets(), std::chrono::microseconds(d_us));
    std::vector<std::int64_t> dev;
    for (int i = 0; i < 20; ++i) {
        const auto r = timed_connect(shim, steady_clock(), server.endpoint(), 5s);
        ASSERT_EQ(r.timing.outcome, Outcome::Success);
        dev.push_back(std::abs(*r.timing.rtt_us - d_us));
    }
    EXPECT_LE(percentile(dev, 0.95), 1000);
    EXPECT_LE(percentile(dev, 1.0), 2000);
}

INSTANTIATE_TEST_SUITE_P(Delays, InjectedDelay, ::testing::Values(5, 20, 50));

DnsResponder::Options responder(std::chrono::milliseconds delay, bool wrong_first = false, bool silent = false) {
    DnsResponder::Options o;
    o.delay = delay;
    o.wrong_txn_first = wrong_first;
    o.silent = silent;
    return o;
}

TEST(TimedDns, MedianMatchesTheResolverDelay) {
    DnsResponder dns(responder(30ms));
    std::vector<std::int64_t> rtts;
    for (int i = 0; i < 15; ++i) {
        const Bytes q = build_dns_query(static_cast<std::uint16_t>(0x1000 + i), "example.com");
        const auto r = timed_dns(posix_sockets(), steady_clock(), q, dns.endpoint(), 1s);
        ASSERT_EQ(r.timing.outcome, Outcome::Success);
        EXPECT_EQ(load_be16(r.reply, 0), 0x1000 + i);
        rtts.push_back(*r.timing.rtt_us);
    }
    const auto median = percentile(rtts, 0.5);
    EXPECT_GE(median, 28'000);
    EXPECT_LE(median, 32'000);
}

TEST(TimedDns, WrongTxnReplyDoesNotStopTheClock) {
    DnsResponder dns(responder(40ms, true));
    std::vector<Bytes> skipped;
    const Bytes q = build_dns_query(0xBEEF, "example.com");
    const auto r = timed_dns(posix_sockets(), steady_clock(), q, dns.endpoint(), 1s,
                             [&](ByteView b) { skipped.emplace_back(b.begin(), b.end()); });
    ASSERT_EQ(r.timing.outcome, Outcome::Success);
    EXPECT_EQ(r.unmatched, 1u);
    ASSERT_EQ(skipped.size(), 1u);
    EXPECT_NE(load_be16(skipped[0], 0), 0xBEEF);
    EXPECT_GE(*r.timing.rtt_us, 39'000);
    EXPECT_LE(*r.timing.rtt_us, 42'000);
}

TEST(TimedDns, SilentResolverTimesOut) {
    DnsResponder dns(responder(0ms, false, true));
    const Bytes q = build_dns_query(1, "example.com");
    const auto start = std::chrono::steady_clock::now();
    const auto r = timed_dns(posix_sockets(), steady_clock(), q, dns.endpoint(), 100ms);
    const auto took = std::chrono::steady_clock::now() - start;
    EXPECT_EQ(r.timing.outcome, Outcome::Timeout);
    EXPECT_FALSE(r.timing.rtt_us);
    EXPECT_GE(took, 95ms);
    EXPECT_LT(took, 300ms);
}

TEST(TimedDns, ShortQueryIsRejected) {
    const Bytes q{1, 2, 3};
    const auto r = timed_dns(posix_sockets(), steady_clock(), q, {Ipv4Addr(127, 0, 0, 1), 53}, 100ms);
    EXPECT_EQ(r.timing.outcome, Outcome::Unreachable);
    EXPECT_EQ(r.error, EINVAL);
}

TEST(DeviceDigest, IsSha1OfSaltThenId) {
    // Standard SHA-1 test vector for "abc", split into salt "a" and id "bc".
    const Bytes salt{'a'};
    EXPECT_EQ(device_id_digest("bc", salt), "a9993e364706816aba3e25717850c26c9cd0d89d");
    EXPECT_EQ(device_id_digest("", {}), "da39a3ee5e6b4b0d3255bfef95601890afd80709");
}

TEST(DeviceDigest, DeterministicAndSaltSensitive) {
    const Bytes s1{1, 2, 3};
    const Bytes s2{1, 2, 4};
    EXPECT_EQ(device_id_digest("device-7", s1), device_id_digest("device-7", s1));
    EXPECT_NE(device_id_digest("device-7", s1), device_id_digest("device-7", s2));
    EXPECT_EQ(device_id_digest("device-7", s1).size(), 40u);
}

TEST(MakeRecord, CarriesContextAndRtt) {
    RecordContext ctx;
    ctx.network_type = NetworkType::CellularLTE;
    ctx.network_label = "CarrierA";
    ctx.session_id = "s1";
    ctx.device_id_hash = device_id_digest("d", Bytes{9});
    FlowKey flow;
    flow.protocol = ipproto::kTcp;
    flow.dst_port = 443;
    AppIdentity app;
    app.uid = 10001;
    app.name = "com.example.chat";
    const auto before = monotonic_wall_us();
    const auto r = make_record(MeasureKind::TcpConnect, app, flow, {Outcome::Success, 76'000}, ctx);
    EXPECT_EQ(r.network_type, NetworkType::CellularLTE);
    EXPECT_EQ(r.rtt_us, 76'000);
    EXPECT_EQ(r.app, app);
    EXPECT_EQ(r.flow, flow);
    EXPECT_EQ(r.network_label, "CarrierA");
    EXPECT_EQ(r.device_id_hash, ctx.device_id_hash);
    EXPECT_TRUE(r.domain.empty());
    EXPECT_GE(r.taken_at, before);
}

TEST(MakeRecord, FailureDropsRtt) {
    const auto r = make_record(MeasureKind::Dns, AppIdentity::unknown(), {}, {Outcome::Timeout, 5}, {}, "a.example");
    EXPECT_FALSE(r.rtt_us);
    EXPECT_EQ(r.domain, "a.example");
}

TEST(MakeRecord, TimestampsNeverDecrease) {
    std::int64_t last = 0;
    for (int i = 0; i < 10'000; ++i) {
        const auto r = make_record(MeasureKind::TcpConnect, {}, {}, {Outcome::Refused, {}}, {});
        EXPECT_GE(r.taken_at, last);
        last = r.taken_at;
    }
}

TEST(EnumText, RoundTrips) {
    for (auto k : {MeasureKind::TcpConnect, MeasureKind::Dns}) EXPECT_EQ(parse_measure_kind(to_string(k)), k);
    for (auto o : {Outcome::Success, Outcome::Refused, Outcome::Timeout, Outcome::Unreachable}) {
        EXPECT_EQ(parse_outcome(to_string(o)), o);
    }
    for (auto t : {NetworkType::Wifi, NetworkType::Cellular2G, NetworkType::Cellular3G, NetworkType::CellularLTE,
                   NetworkType::Wired, NetworkType::Unknown}) {
        EXPECT_EQ(parse_network_type(to_string(t)), t);
    }
    EXPECT_FALSE(parse_outcome("success"));
    EXPECT_FALSE(parse_network_type(""));
}

} // namespace
} // namespace flowlens
