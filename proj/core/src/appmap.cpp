// SPDX-License-Identifier: Apache-2.0

#include "flowlens/appmap.hpp"

#include <pwd.h>
#include <unistd.h>

#include <cctype>
#include <charconv>
#include <fstream>
#include <sstream>
#include <thread>

#include "flowlens/instrument.hpp"

namespace flowlens {

namespace {

std::vector<std::string_view> split_ws(std::string_view line) {
    std::vector<std::string_view> out;
    std::size_t i = 0;
    while (i < line.size()) {
        while (i < line.size() && (line[i] == ' ' || line[i] == '\t')) ++i;
        const std::size_t start = i;
        while (i < line.size() && line[i] != ' ' && line[i] != '\t') ++i;
        if (i > start) out.push_back(line.substr(start, i - start));
    }
    return out;
}

template <typename T>
bool parse_hex(std::string_view s, T& out) {
    if (s.empty()) return false;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), out, 16);
    return ec == std::errc() && p == s.data() + s.size();
}

template <typename T>
bool parse_dec(std::string_view s, T& out) {
    if (s.empty()) return false;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), out, 10);
    return ec == std::errc() && p == s.data() + s.size();
}

// The kernel prints each 32-bit word of the address in host byte order; the
// relay only targets little-endian hosts.
bool parse_v4_word(std::string_view hex, Ipv4Addr& out) {
    std::uint32_t raw = 0;
    if (hex.size() != 8 || !parse_hex(hex, raw)) return false;
    out = Ipv4Addr(__builtin_bswap32(raw));
    return true;
}

// "ADDR:PORT"; ADDR is 8 hex digits (v4) or 32 (v6, accepted only if v4-mapped).
// Returns 0 on success, 1 for a v6 address we do not track, 2 when malformed.
int parse_address(std::string_view field, Ipv4Addr& addr, std::uint16_t& port) {
    const auto colon = field.find(':');
    if (colon == std::string_view::npos) return 2;
    const std::string_view a = field.substr(0, colon);
    if (!parse_hex(field.substr(colon + 1), port) || field.size() - colon - 1 != 4) return 2;
    if (a.size() == 8) return parse_v4_word(a, addr) ? 0 : 2;
    if (a.size() == 32) {
        for (char c : a) {
            if (!std::isxdigit(static_cast<unsigned char>(c))) return 2;
        }
        // "::" is the unspecified address; dual-stack sockets use it as a wildcard.
        if (a == "00000000000000000000000000000000") {
            addr = Ipv4Addr{};
            return 0;
        }
        if (a.substr(0, 16) != "0000000000000000" || (a.substr(16, 8) != "FFFF0000" && a.substr(16, 8) != "ffff0000")) {
            return 1;
        }
        return parse_v4_word(a.substr(24, 8), addr) ? 0 : 2;
    }
    return 2;
}

std::string hex_word(std::uint32_t v, int digits) {
    static const char* kHex = "0123456789ABCDEF";
    std::string s(static_cast<std::size_t>(digits), '0');
    for (int i = digits - 1; i >= 0; --i) {
        s[static_cast<std::size_t>(i)] = kHex[v & 0xF];
        v >>= 4;
    }
    return s;
}

} // namespace

std::vector<SocketTableEntry> parse_socket_table(std::string_view text, std::size_t* malformed) {
    std::vector<SocketTableEntry> out;
    std::size_t bad = 0;
    bool header = true;
    while (!text.empty()) {
        const auto nl = text.find('\n');
        std::string_view line = text.substr(0, nl);
        text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
        if (header) {
            header = false;
            continue;
        }
        const auto f = split_ws(line);
        if (f.empty()) continue;
        if (f.size() < 10 || f[0].back() != ':') {
            ++bad;
            continue;
        }
        SocketTableEntry e;
        const int l = parse_address(f[1], e.local_addr, e.local_port);
        const int r = parse_address(f[2], e.remote_addr, e.remote_port);
        if (l == 1 || r == 1) continue;
        if (l != 0 || r != 0 || !parse_dec(f[7], e.owner_uid) || !parse_dec(f[9], e.inode)) {
            ++bad;
            continue;
        }
        out.push_back(e);
    }
    if (malformed != nullptr) *malformed = bad;
    return out;
}

std::string format_socket_table(const std::vector<SocketTableEntry>& entries) {
    std::ostringstream os;
    os << "  sl  local_address rem_address   st tx_queue rx_queue tr tm->when retrnsmt   uid  timeout inode\n";
    int sl = 0;
    for (const auto& e : entries) {
        os << "   " << sl++ << ": " << hex_word(__builtin_bswap32(e.local_addr.value), 8) << ':'
           << hex_word(e.local_port, 4) << ' ' << hex_word(__builtin_bswap32(e.remote_addr.value), 8) << ':'
           << hex_word(e.remote_port, 4) << " 01 00000000:00000000 00:00000000 00000000 " << e.owner_uid << " 0 "
           << e.inode << " 1 0000000000000000 20 4 30 10 -1\n";
    }
    return os.str();
}

AppIdentity AppIdentity::unknown(std::int64_t uid) {
    AppIdentity a;
    a.uid = uid;
    a.name = "unknown:" + std::to_string(uid);
    return a;
}

std::string FileProcSource::read_table(SocketTable table) {
    const char* name = "tcp";
    switch (table) {
    case SocketTable::Tcp: name = "tcp"; break;
    case SocketTable::Tcp6: name = "tcp6"; break;
    case SocketTable::Udp: name = "udp"; break;
    case SocketTable::Udp6: name = "udp6"; break;
    }
    std::ifstream in(root_ + "/" + name);
    if (!in) return {};
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

void MockProcSource::set_parse_cost(std::chrono::microseconds cost) {
    std::lock_guard lk(mu_);
    parse_cost_ = cost;
}

void MockProcSource::add(SocketTable table, const SocketTableEntry& entry) {
    std::lock_guard lk(mu_);
    tables_[table].push_back(entry);
}

void MockProcSource::remove_local(SocketTable table, Ipv4Addr addr, std::uint16_t port) {
    std::lock_guard lk(mu_);
    auto& v = tables_[table];
    std::erase_if(v, [&](const SocketTableEntry& e) { return e.local_addr == addr && e.local_port == port; });
}

void MockProcSource::clear() {
    std::lock_guard lk(mu_);
    tables_.clear();
}

std::string MockProcSource::read_table(SocketTable table) {
    std::string text;
    std::chrono::microseconds cost{0};
    {
        std::lock_guard lk(mu_);
        if (table == SocketTable::Tcp) {
            ++reads_;
            cost = parse_cost_;
        }
        text = format_socket_table(tables_[table]);
    }
    if (cost.count() > 0) std::this_thread::sleep_for(cost);
    return text;
}

std::uint64_t MockProcSource::reads() const {
    std::lock_guard lk(mu_);
    return reads_;
}

std::optional<std::string> SystemUidResolver::name_for(std::int64_t uid) {
    if (uid < 0) return std::nullopt;
    passwd pw{};
    passwd* result = nullptr;
    std::vector<char> buf(4096);
    if (::getpwuid_r(static_cast<uid_t>(uid), &pw, buf.data(), buf.size(), &result) != 0 || result == nullptr) {
        return std::nullopt;
    }
    return std::string(pw.pw_name);
}

void StaticUidResolver::set(std::int64_t uid, std::string name) {
    std::lock_guard lk(mu_);
    names_[uid] = std::move(name);
}

std::optional<std::string> StaticUidResolver::name_for(std::int64_t uid) {
    std::lock_guard lk(mu_);
    auto it = names_.find(uid);
    if (it == names_.end()) return std::nullopt;
    return it->second;
}

SocketSnapshot take_snapshot(ProcSource& source, const Clock& clock) {
    note_guarded_op(GuardedOp::ProcParse);
    SocketSnapshot s;
    s.taken_at_ns = clock.now_ns();
    s.tcp = parse_socket_table(source.read_table(SocketTable::Tcp));
    auto tcp6 = parse_socket_table(source.read_table(SocketTable::Tcp6));
    s.tcp.insert(s.tcp.end(), tcp6.begin(), tcp6.end());
    s.udp = parse_socket_table(source.read_table(SocketTable::Udp));
    auto udp6 = parse_socket_table(source.read_table(SocketTable::Udp6));
    s.udp.insert(s.udp.end(), udp6.begin(), udp6.end());
    return s;
}

std::optional<SocketTableEntry> find_owner(const SocketSnapshot& snap, const FlowKey& flow) {
    const auto& table = flow.protocol == ipproto::kUdp ? snap.udp : snap.tcp;
    std::optional<SocketTableEntry> local_only;
    for (const auto& e : table) {
        if (e.local_port != flow.src_port) continue;
        if (e.local_addr != flow.src_addr && e.local_addr != Ipv4Addr{}) continue;
        if (e.remote_addr == flow.dst_addr && e.remote_port == flow.dst_port && e.local_addr == flow.src_addr) {
            return e;
        }
        if (!local_only || (local_only->local_addr == Ipv4Addr{} && e.local_addr == flow.src_addr)) local_only = e;
    }
    return local_only;
}

MappingCoordinator::MappingCoordinator(ProcSource& source, UidResolver& resolver, const Clock& clock)
    : MappingCoordinator(source, resolver, clock, Options{}) {}

MappingCoordinator::MappingCoordinator(ProcSource& source, UidResolver& resolver, const Clock& clock, Options options)
    : source_(source), resolver_(resolver), clock_(clock), options_(options) {}

AppIdentity MappingCoordinator::identify(const SocketSnapshot& snap, const FlowKey& flow) {
    auto entry = find_owner(snap, flow);
    if (!entry) {
        AppIdentity a = AppIdentity::unknown(-1);
        a.resolved_at_us = monotonic_wall_us();
        return a;
    }
    AppIdentity a;
    a.uid = entry->owner_uid;
    auto name = resolver_.name_for(entry->owner_uid);
    a.name = name ? *name : "unknown:" + std::to_string(entry->owner_uid);
    a.resolved_at_us = monotonic_wall_us();
    return a;
}

AppIdentity MappingCoordinator::map_flow(const FlowKey& flow, std::int64_t connect_done_ns) {
    std::unique_lock lk(mu_);
    ++stats_.lookups;
    int rounds = 0;
    while (true) {
        if (snapshot_ && snapshot_->taken_at_ns >= connect_done_ns) {
            auto snap = snapshot_;
            ++stats_.parses_avoided;
            lk.unlock();
            return identify(*snap, flow);
        }
        if (!in_flight_) {
            in_flight_ = true;
            lk.unlock();
            std::shared_ptr<const SocketSnapshot> snap;
            try {
                snap = std::make_shared<const SocketSnapshot>(take_snapshot(source_, clock_));
            } catch (...) {
                lk.lock();
                in_flight_ = false;
                cv_.notify_all();
                throw;
            }
            lk.lock();
            if (!snapshot_ || snapshot_->taken_at_ns <= snap->taken_at_ns) snapshot_ = snap;
            in_flight_ = false;
            ++stats_.parses_performed;
            cv_.notify_all();
            lk.unlock();
            return identify(*snap, flow);
        }
        if (rounds >= options_.max_rounds) {
            ++stats_.gave_up;
            auto snap = snapshot_;
            lk.unlock();
            if (!snap) return AppIdentity::unknown(-1);
            return identify(*snap, flow);
        }
        cv_.wait_for(lk, options_.sleep_quantum);
        ++rounds;
        ++stats_.wait_rounds;
    }
}

AppIdentity MappingCoordinator::map_eager(const FlowKey& flow) {
    const SocketSnapshot snap = take_snapshot(source_, clock_);
    {
        std::lock_guard lk(mu_);
        ++stats_.lookups;
        ++stats_.parses_performed;
    }
    return identify(snap, flow);
}

MappingStats MappingCoordinator::stats() const {
    std::lock_guard lk(mu_);
    return stats_;
}

} // namespace flowlens
