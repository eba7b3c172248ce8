// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <arpa/inet.h>
#include <sys/socket.h>
#include <sys/stat.h>
#include <unistd.h>

#include <algorithm>
#include <atomic>
#include <barrier>
#include <thread>

#include "flowlens/appmap.hpp"
#include "generators.hpp"

namespace flowlens {
namespace {

using namespace std::chrono_literals;

constexpr const char* kHeader =
    "  sl  local_address rem_address   st tx_queue rx_queue tr tm->when retrnsmt   uid  timeout inode\n";

FlowKey tcp_flow(std::uint16_t src_port, Ipv4Addr dst = Ipv4Addr(93, 184, 216, 34), std::uint16_t dst_port = 443) {
    FlowKey k;
    k.protocol = ipproto::kTcp;
    k.src_addr = Ipv4Addr(10, 0, 0, 2);
    k.src_port = src_port;
    k.dst_addr = dst;
    k.dst_port = dst_port;
    return k;
}

SocketTableEntry entry_for(const FlowKey& k, std::int64_t uid, std::uint64_t inode = 1) {
    return {k.src_addr, k.src_port, k.dst_addr, k.dst_port, uid, inode};
}

// --- parse_socket_table -----------------------------------------------------

TEST(ParseSocketTable, HeaderOnlyIsEmpty) {
    std::size_t bad = 99;
    EXPECT_TRUE(parse_socket_table(kHeader, &bad).empty());
    EXPECT_EQ(bad, 0u);
    EXPECT_TRUE(parse_socket_table("").empty());
}

TEST(ParseSocketTable, ExtractsAddressPortUidInode) {
    const std::string text = std::string(kHeader) +
                             "   0: 0100007F:1F90 00000000:0000 0A 00000000:00000000 00:00000000 00000000 10123 "
                             "0 4242 1 0000000000000000 100 0 0 10 0\n";
    const auto rows = parse_socket_table(text);
    ASSERT_EQ(rows.size(), 1u);
    EXPECT_EQ(rows[0].local_addr, Ipv4Addr(127, 0, 0, 1));
    EXPECT_EQ(rows[0].local_port, 8080);
    EXPECT_EQ(rows[0].remote_addr, Ipv4Addr{});
    EXPECT_EQ(rows[0].remote_port, 0);
    EXPECT_EQ(rows[0].owner_uid, 10123);
    EXPECT_EQ(rows[0].inode, 4242u);
}

TEST(ParseSocketTable, MalformedRowsAreSkippedAndCounted) {
    const std::string good =
        "   1: 0200000A:A028 22D8B85D:01BB 01 00000000:00000000 00:00000000 00000000 10001 0 77 1 0 20 4 30 10 -1\n";
    const std::string text = std::string(kHeader) + good + "   2: garbage\n" +
                             "   3: 0200000A:ZZZZ 22D8B85D:01BB 01 00000000:00000000 00:00000000 00000000 1 0 7\n" +
                             "\n" + good;
    std::size_t bad = 0;
    const auto rows = parse_socket_table(text, &bad);
    EXPECT_EQ(rows.size(), 2u);
    EXPECT_EQ(bad, 2u);
    EXPECT_EQ(rows[0].remote_addr, Ipv4Addr(93, 184, 216, 34));
    EXPECT_EQ(rows[0].remote_port, 443);
}

TEST(ParseSocketTable, V6RowsKeepOnlyMappedAddresses) {
    const std::string text =
        std::string(kHeader) +
        "   0: 0000000000000000FFFF00000100007F:0050 0000000000000000FFFF00000200000A:9C40 01 "
        "00000000:00000000 00:00000000 00000000 1000 0 11 1 0 20 4 30 10 -1\n"
        "   1: 00000000000000000000000001000000:0050 00000000000000000000000000000000:0000 0A "
        "00000000:00000000 00:00000000 00000000 1000 0 12 1 0 20 4 30 10 -1\n"
        "   2: 00000000000000000000000000000000:0051 00000000000000000000000000000000:0000 0A "
        "00000000:00000000 00:00000000 00000000 1000 0 12 1 0 20 4 30 10 -1\n";
    std::size_t bad = 0;
    const auto rows = parse_socket_table(text, &bad);
    ASSERT_EQ(rows.size(), 2u);
    EXPECT_EQ(bad, 0u);
    EXPECT_EQ(rows[0].local_addr, Ipv4Addr(127, 0, 0, 1));
    EXPECT_EQ(rows[0].remote_addr, Ipv4Addr(10, 0, 0, 2));
    EXPECT_EQ(rows[0].remote_port, 40000);
    // The unspecified address reads as the v4 wildcard.
    EXPECT_EQ(rows[1].local_addr, Ipv4Addr{});
    EXPECT_EQ(rows[1].local_port, 0x51);
}

TEST(ParseSocketTable, FormatRoundTripsRandomTables) {
    testing::Gen g(31);
    for (int round = 0; round < 200; ++round) {
        std::vector<SocketTableEntry> rows(g.range(0, 40));
        for (auto& e : rows) {
            e = {Ipv4Addr(g.u32()), g.u16(), Ipv4Addr(g.u32()), g.u16(), static_cast<std::int64_t>(g.range(0, 1u << 20)),
                 g.u32()};
        }
        std::size_t bad = 1;
        EXPECT_EQ(parse_socket_table(format_socket_table(rows), &bad), rows);
        EXPECT_EQ(bad, 0u);
    }
}

// The kernel renders sockets this test owns; the parsed rows must agree with
// what the socket calls and fstat report about them.
struct OwnedListener {
    UniqueFd fd;
    std::uint16_t port = 0;
    std::uint64_t inode = 0;
};

OwnedListener listen_on(int family) {
    OwnedListener l;
    l.fd = UniqueFd(::socket(family, SOCK_STREAM, 0));
    if (!l.fd) return l;
    int rc = -1;
    if (family == AF_INET) {
        sockaddr_in sa{};
        sa.sin_family = AF_INET;
        sa.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
        rc = ::bind(l.fd.get(), reinterpret_cast<sockaddr*>(&sa), sizeof sa);
    } else {
        sockaddr_in6 sa{};
        sa.sin6_family = AF_INET6;
        ::inet_pton(AF_INET6, "::ffff:127.0.0.1", &sa.sin6_addr);
        rc = ::bind(l.fd.get(), reinterpret_cast<sockaddr*>(&sa), sizeof sa);
    }
    if (rc != 0 || ::listen(l.fd.get(), 1) != 0) return {};
    sockaddr_storage ss{};
    socklen_t len = sizeof ss;
    ::getsockname(l.fd.get(), reinterpret_cast<sockaddr*>(&ss), &len);
    l.port = family == AF_INET ? ntohs(reinterpret_cast<sockaddr_in*>(&ss)->sin_port)
                               : ntohs(reinterpret_cast<sockaddr_in6*>(&ss)->sin6_port);
    struct stat st {};
    ::fstat(l.fd.get(), &st);
    l.inode = st.st_ino;
    return l;
}

void expect_rendered(SocketTable table, const OwnedListener& l) {
    FileProcSource proc;
    const auto rows = parse_socket_table(proc.read_table(table));
    auto it = std::find_if(rows.begin(), rows.end(), [&](const SocketTableEntry& e) { return e.inode == l.inode; });
    ASSERT_NE(it, rows.end()) << "socket inode " << l.inode << " not in table";
    EXPECT_EQ(it->local_addr, Ipv4Addr(127, 0, 0, 1));
    EXPECT_EQ(it->local_port, l.port);
    EXPECT_EQ(it->owner_uid, static_cast<std::int64_t>(::getuid()));
}

TEST(ParseSocketTable, AgreesWithKernelRenderingV4) {
    const auto l = listen_on(AF_INET);
    ASSERT_TRUE(l.fd);
    expect_rendered(SocketTable::Tcp, l);
}

TEST(ParseSocketTable, AgreesWithKernelRenderingV4Mapped) {
    const auto l = listen_on(AF_INET6);
    if (!l.fd) GTEST_SKIP() << "no IPv6 loopback";
    expect_rendered(SocketTable::Tcp6, l);
}

// --- find_owner ---------------------------------------------------------------

TEST(FindOwner, ExactMatchBeatsWildcard) {
    const FlowKey k = tcp_flow(40000);
    SocketSnapshot s;
    s.tcp.push_back({Ipv4Addr{}, 40000, Ipv4Addr{}, 0, 1, 1});
    s.tcp.push_back(entry_for(k, 2));
    s.tcp.push_back({k.src_addr, 40000, Ipv4Addr(1, 1, 1, 1), 80, 3, 3});
    auto e = find_owner(s, k);
    ASSERT_TRUE(e);
    EXPECT_EQ(e->owner_uid, 2);
}

TEST(FindOwner, SpecificLocalBeatsWildcardLocal) {
    const FlowKey k = tcp_flow(40000);
    SocketSnapshot s;
    s.tcp.push_back({Ipv4Addr{}, 40000, Ipv4Addr{}, 0, 1, 1});
    s.tcp.push_back({k.src_addr, 40000, Ipv4Addr{}, 0, 2, 2});
    EXPECT_EQ(find_owner(s, k)->owner_uid, 2);
}

TEST(FindOwner, UsesTheFlowsProtocolTable) {
    FlowKey k = tcp_flow(5353, Ipv4Addr(8, 8, 8, 8), 53);
    SocketSnapshot s;
    s.tcp.push_back(entry_for(k, 1));
    k.protocol = ipproto::kUdp;
    EXPECT_FALSE(find_owner(s, k));
    s.udp.push_back({Ipv4Addr{}, 5353, Ipv4Addr{}, 0, 9, 9});
    EXPECT_EQ(find_owner(s, k)->owner_uid, 9);
}

TEST(FindOwner, RemoteEndpointAloneNeverMatches) {
    const FlowKey k = tcp_flow(40000);
    SocketSnapshot s;
    s.tcp.push_back({k.src_addr, 40001, k.dst_addr, k.dst_port, 5, 5});
    EXPECT_FALSE(find_owner(s, k));
}

// --- coordinator ------------------------------------------------------------

TEST(MappingCoordinator, AbsentFlowIsUnknownMinusOne) {
    MockProcSource proc;
    StaticUidResolver names;
    MappingCoordinator m(proc, names);
    const AppIdentity a = m.map_flow(tcp_flow(40000), steady_clock().now_ns());
    EXPECT_EQ(a.uid, -1);
    EXPECT_EQ(a.name, "unknown:-1");
}

TEST(MappingCoordinator, UnresolvedUidKeepsTheUid) {
    MockProcSource proc;
    StaticUidResolver names({{10001, "com.example.chat"}});
    MappingCoordinator m(proc, names);
    proc.add(SocketTable::Tcp, entry_for(tcp_flow(40000), 10001));
    proc.add(SocketTable::Tcp, entry_for(tcp_flow(40001), 10077));
    EXPECT_EQ(m.map_flow(tcp_flow(40000), steady_clock().now_ns()).name, "com.example.chat");
    const AppIdentity b = m.map_flow(tcp_flow(40001), 0);
    EXPECT_EQ(b.uid, 10077);
    EXPECT_EQ(b.name, "unknown:10077");
}

TEST(MappingCoordinator, TenSimultaneousLookupsShareOneParse) {
    MockProcSource proc;
    proc.set_parse_cost(100ms);
    StaticUidResolver names;
    MappingCoordinator m(proc, names);
    for (std::uint16_t i = 0; i < 10; ++i) proc.add(SocketTable::Tcp, entry_for(tcp_flow(40000 + i), 10000 + i));
    const std::int64_t done = steady_clock().now_ns();
    std::vector<AppIdentity> got(10);
    std::vector<std::thread> workers;
    std::barrier start(10);
    for (std::uint16_t i = 0; i < 10; ++i) {
        workers.emplace_back([&, i] {
            start.arrive_and_wait();
            got[i] = m.map_flow(tcp_flow(40000 + i), done);
        });
    }
    for (auto& t : workers) t.join();
    for (std::uint16_t i = 0; i < 10; ++i) EXPECT_EQ(got[i].uid, 10000 + i);
    const auto st = m.stats();
    EXPECT_EQ(st.lookups, 10u);
    EXPECT_EQ(st.parses_performed, 1u);
    EXPECT_EQ(st.parses_avoided, 9u);
    EXPECT_EQ(st.gave_up, 0u);
    EXPECT_EQ(proc.reads(), 1u);
    EXPECT_DOUBLE_EQ(st.mitigation_ratio(), 0.9);
}

TEST(MappingCoordinator, StaleSnapshotNeverServesANewerConnect) {
    MockProcSource proc;
    StaticUidResolver names;
    MappingCoordinator m(proc, names);
    EXPECT_EQ(m.map_flow(tcp_flow(40000), steady_clock().now_ns()).uid, -1);
    proc.add(SocketTable::Tcp, entry_for(tcp_flow(40000), 10001));
    EXPECT_EQ(m.map_flow(tcp_flow(40000), steady_clock().now_ns()).uid, 10001);
    EXPECT_EQ(m.stats().parses_performed, 2u);
}

TEST(MappingCoordinator, WaitingIsBoundedWhenTheParserIsSlow) {
    MockProcSource proc;
    proc.set_parse_cost(600ms);
    StaticUidResolver names;
    MappingCoordinator m(proc, names);
    proc.add(SocketTable::Tcp, entry_for(tcp_flow(40000), 10001));
    const std::int64_t done = steady_clock().now_ns();
    std::thread parser([&] { m.map_flow(tcp_flow(40000), done); });
    while (proc.reads() == 0) std::this_thread::sleep_for(1ms);
    const auto start = std::chrono::steady_clock::now();
    const AppIdentity late = m.map_flow(tcp_flow(40000), done);
    const auto waited = std::chrono::steady_clock::now() - start;
    parser.join();
    // Three 50 ms rounds, then give up with no snapshot to serve from.
    EXPECT_GE(waited, 140ms);
    EXPECT_LT(waited, 400ms);
    EXPECT_EQ(late.uid, -1);
    EXPECT_EQ(m.stats().gave_up, 1u);
    EXPECT_EQ(m.stats().wait_rounds, 3u);
}

TEST(MappingCoordinator, EagerAlwaysParses) {
    MockProcSource proc;
    StaticUidResolver names;
    MappingCoordinator m(proc, names);
    for (int i = 0; i < 5; ++i) m.map_eager(tcp_flow(40000));
    EXPECT_EQ(proc.reads(), 5u);
    EXPECT_EQ(m.stats().parses_performed, 5u);
    EXPECT_DOUBLE_EQ(m.stats().mitigation_ratio(), 0.0);
}

TEST(MappingCoordinator, MissingProcRootGivesUnknown) {
    FileProcSource proc("/nonexistent/proc/net");
    StaticUidResolver names;
    MappingCoordinator m(proc, names);
    EXPECT_EQ(m.map_flow(tcp_flow(40000), 0).name, "unknown:-1");
}

// Counts concurrent table reads; a second reader while one is active would
// be two parses in the same generation.
class ConcurrencyProbe final : public ProcSource {
public:
    explicit ConcurrencyProbe(MockProcSource& inner) : inner_(inner) {}
    std::string read_table(SocketTable table) override {
        if (table != SocketTable::Tcp) return inner_.read_table(table);
        const int now = ++active_;
        int seen = max_.load();
        while (now > seen && !max_.compare_exchange_weak(seen, now)) {
        }
        auto text = inner_.read_table(table);
        --active_;
        return text;
    }
    int max_concurrent() const { return max_.load(); }

private:
    MockProcSource& inner_;
    std::atomic<int> active_{0};
    std::atomic<int> max_{0};
};

TEST(MappingCoordinatorProperty, StormsNeverRunTwoParsersAndMatchEagerOracle) {
    testing::Gen g(77);
    for (int round = 0; round < 20; ++round) {
        MockProcSource proc;
        proc.set_parse_cost(std::chrono::microseconds(g.range(0, 20'000)));
        ConcurrencyProbe probe(proc);
        StaticUidResolver names;
        for (std::int64_t uid = 10000; uid < 10005; ++uid) names.set(uid, "app" + std::to_string(uid));
        MappingCoordinator m(probe, names);

        // Table mutations happen between bursts, so within a burst the eager
        // answer computed now is the answer at every instant of the burst.
        std::vector<FlowKey> flows;
        const std::size_t n = g.range(1, 24);
        for (std::size_t i = 0; i < n; ++i) {
            const FlowKey k = tcp_flow(static_cast<std::uint16_t>(30000 + round * 100 + i),
                                       Ipv4Addr(93, 184, 216, static_cast<std::uint8_t>(g.range(1, 9))));
            flows.push_back(k);
            if (g.coin(0.8)) proc.add(SocketTable::Tcp, entry_for(k, static_cast<std::int64_t>(g.range(10000, 10006))));
        }
        if (g.coin(0.3)) proc.add(SocketTable::Tcp, {Ipv4Addr{}, flows[0].src_port, Ipv4Addr{}, 0, 10004, 1});

        const std::string tcp_text = proc.read_table(SocketTable::Tcp);
        SocketSnapshot oracle_snap;
        oracle_snap.tcp = parse_socket_table(tcp_text);

        const std::uint64_t reads_before = proc.reads();
        const std::int64_t done = steady_clock().now_ns();
        std::vector<AppIdentity> got(n);
        std::vector<std::thread> workers;
        for (std::size_t i = 0; i < n; ++i) {
            workers.emplace_back([&, i] {
                std::this_thread::sleep_for(std::chrono::microseconds((i * 997) % 5000));
                got[i] = m.map_flow(flows[i], done);
            });
        }
        for (auto& t : workers) t.join();

        EXPECT_EQ(probe.max_concurrent(), 1);
        const auto st = m.stats();
        EXPECT_EQ(proc.reads() - reads_before, st.parses_performed);
        EXPECT_EQ(st.parses_performed + st.parses_avoided + st.gave_up, st.lookups);
        EXPECT_EQ(st.gave_up, 0u); // parse cost stays well under the wait budget
        for (std::size_t i = 0; i < n; ++i) {
            const auto owner = find_owner(oracle_snap, flows[i]);
            const std::int64_t want = owner ? owner->owner_uid : -1;
            EXPECT_EQ(got[i].uid, want) << "flow " << i;
            const AppIdentity eager = m.map_eager(flows[i]);
            EXPECT_EQ(got[i], eager) << "flow " << i;
        }
    }
}

} // namespace
} // namespace flowlens
