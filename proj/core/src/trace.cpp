// SPDX-License-Identifier: Apache-2.0

#include "flowlens/trace.hpp"

#include <condition_variable>
#include <fstream>
#include <iterator>
#include <map>
#include <memory>
#include <mutex>
#include <sstream>
#include <thread>

#include "flowlens/loopback.hpp"
#include "flowlens/relay.hpp"

namespace flowlens {

namespace {

void put_be32(Bytes& out, std::uint32_t v) {
    for (int s = 24; s >= 0; s -= 8) out.push_back(static_cast<std::uint8_t>(v >> s));
}

void put_be64(Bytes& out, std::uint64_t v) {
    for (int s = 56; s >= 0; s -= 8) out.push_back(static_cast<std::uint8_t>(v >> s));
}

std::uint64_t get_be64(ByteView b, std::size_t off) {
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < 8; ++i) v = (v << 8) | b[off + i];
    return v;
}

const char* kind_name(ResponderSpec::Kind k) {
    switch (k) {
    case ResponderSpec::Kind::Listen: return "listen";
    case ResponderSpec::Kind::Refuse: return "refuse";
    case ResponderSpec::Kind::Dns: return "dns";
    }
    return "?";
}

// Forwards to the real sink and counts.
class CountingSink final : public RecordSink {
public:
    explicit CountingSink(RecordSink& inner) : inner_(inner) {}
    void submit(MeasurementRecord rec) override {
        inner_.submit(std::move(rec));
        std::lock_guard lk(mu_);
        ++count_;
        cv_.notify_all();
    }
    void wait_for(std::size_t n, std::chrono::milliseconds timeout) {
        std::unique_lock lk(mu_);
        cv_.wait_for(lk, timeout, [&] { return count_ >= n; });
    }

private:
    RecordSink& inner_;
    std::mutex mu_;
    std::condition_variable cv_;
    std::size_t count_ = 0;
};

} // namespace

std::string format_trace_header(const std::vector<ResponderSpec>& responders) {
    std::ostringstream os;
    for (const auto& r : responders) {
        os << kind_name(r.kind) << ' ' << r.at.to_string();
        if (r.kind == ResponderSpec::Kind::Dns) {
            if (r.delay.count() > 0) os << " delay_ms=" << r.delay.count();
            if (r.wrong_txn_first) os << " wrong_txn_first";
            if (r.silent) os << " silent";
        }
        os << '\n';
    }
    return os.str();
}

std::vector<ResponderSpec> parse_trace_header(std::string_view text) {
    std::vector<ResponderSpec> out;
    std::istringstream in{std::string(text)};
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        std::istringstream ls(line);
        std::string kind;
        if (!(ls >> kind) || kind[0] == '#') continue;
        ResponderSpec r;
        if (kind == "listen") {
            r.kind = ResponderSpec::Kind::Listen;
        } else if (kind == "refuse") {
            r.kind = ResponderSpec::Kind::Refuse;
        } else if (kind == "dns") {
            r.kind = ResponderSpec::Kind::Dns;
        } else {
            throw TraceError("trace header line " + std::to_string(lineno) + ": unknown responder '" + kind + "'");
        }
        std::string addr;
        if (!(ls >> addr)) throw TraceError("trace header line " + std::to_string(lineno) + ": missing address");
        auto ep = Endpoint::parse(addr);
        if (!ep) throw TraceError("trace header line " + std::to_string(lineno) + ": bad address '" + addr + "'");
        r.at = *ep;
        std::string opt;
        while (ls >> opt) {
            if (r.kind == ResponderSpec::Kind::Dns && opt.rfind("delay_ms=", 0) == 0) {
                try {
                    r.delay = std::chrono::milliseconds(std::stoul(opt.substr(9)));
                } catch (const std::exception&) {
                    throw TraceError("trace header line " + std::to_string(lineno) + ": bad delay");
                }
            } else if (r.kind == ResponderSpec::Kind::Dns && opt == "wrong_txn_first") {
                r.wrong_txn_first = true;
            } else if (r.kind == ResponderSpec::Kind::Dns && opt == "silent") {
                r.silent = true;
            } else {
                throw TraceError("trace header line " + std::to_string(lineno) + ": unknown option '" + opt + "'");
            }
        }
        out.push_back(r);
    }
    return out;
}

Bytes serialize_trace(const Trace& trace) {
    Bytes out(std::begin(kTraceMagic), std::end(kTraceMagic));
    const std::string header = format_trace_header(trace.responders);
    put_be32(out, static_cast<std::uint32_t>(header.size()));
    out.insert(out.end(), header.begin(), header.end());
    for (const auto& f : trace.frames) {
        put_be64(out, f.offset_us);
        put_be32(out, static_cast<std::uint32_t>(f.packet.size()));
        out.insert(out.end(), f.packet.begin(), f.packet.end());
    }
    return out;
}

Trace parse_trace(ByteView b) {
    if (b.size() < 12 || !std::equal(std::begin(kTraceMagic), std::end(kTraceMagic), b.begin())) {
        throw TraceError("not a trace file (bad magic)");
    }
    const std::uint32_t hlen = load_be32(b, 8);
    if (b.size() < 12 + static_cast<std::size_t>(hlen)) throw TraceError("truncated trace header");
    Trace t;
    t.responders = parse_trace_header(
        std::string_view(reinterpret_cast<const char*>(b.data()) + 12, hlen));
    std::size_t off = 12 + hlen;
    while (off < b.size()) {
        if (b.size() - off < 12) throw TraceError("truncated frame header at byte " + std::to_string(off));
        TraceFrame f;
        f.offset_us = get_be64(b, off);
        const std::uint32_t len = load_be32(b, off + 8);
        off += 12;
        if (b.size() - off < len) throw TraceError("truncated frame at byte " + std::to_string(off));
        f.packet.assign(b.begin() + static_cast<std::ptrdiff_t>(off),
                        b.begin() + static_cast<std::ptrdiff_t>(off + len));
        off += len;
        t.frames.push_back(std::move(f));
    }
    return t;
}

Trace load_trace(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw TraceError("cannot open trace " + path);
    const Bytes data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return parse_trace(data);
}

void save_trace(const std::string& path, const Trace& trace) {
    const Bytes data = serialize_trace(trace);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size()));
    if (!out) throw TraceError("cannot write trace " + path);
}

Trace make_sample_trace() {
    const Ipv4Addr app(10, 0, 0, 2);
    const Endpoint web{Ipv4Addr(93, 184, 216, 34), 80};
    const Endpoint closed{Ipv4Addr(93, 184, 216, 35), 443};
    const Endpoint resolver{Ipv4Addr(8, 8, 8, 8), 53};

    Trace t;
    t.responders = {
        {ResponderSpec::Kind::Listen, web, {}, false, false},
        {ResponderSpec::Kind::Refuse, closed, {}, false, false},
        {ResponderSpec::Kind::Dns, resolver, std::chrono::milliseconds(30), false, false},
    };
    auto tcp = [&](std::uint64_t at_ms, std::uint16_t sport, const Endpoint& dst, std::uint32_t seq, TcpFlags flags,
                   std::string_view data) {
        TcpSegment s;
        s.src_port = sport;
        s.dst_port = dst.port;
        s.seq = seq;
        s.ack = flags.ack ? 1 : 0; // rewritten at replay time
        s.flags = flags;
        s.window = 65535;
        if (flags.syn) s.mss = 1460;
        s.payload.assign(data.begin(), data.end());
        t.frames.push_back({at_ms * 1000, serialize_ipv4(make_tcp_packet(app, dst.addr, s))});
    };
    TcpFlags syn;
    syn.syn = true;
    TcpFlags ack;
    ack.ack = true;
    TcpFlags psh = ack;
    psh.psh = true;
    TcpFlags fin = ack;
    fin.fin = true;

    const std::string_view req = "GET / HTTP/1.0\r\n\r\n";
    tcp(0, 41000, web, 1000, syn, {});
    UdpDatagram q;
    q.src_port = 41001;
    q.dst_port = resolver.port;
    q.payload = build_dns_query(0x1234, "example.com");
    t.frames.push_back({5'000, serialize_ipv4(make_udp_packet(app, resolver.addr, q))});
    tcp(10, 41000, web, 1001, ack, {});
    tcp(11, 41000, web, 1001, psh, req);
    tcp(20, 41002, web, 5000, syn, {});
    tcp(30, 41002, web, 5001, ack, {});
    tcp(40, 41002, web, 5001, fin, {});
    tcp(50, 41003, closed, 9000, syn, {});
    tcp(100, 41000, web, 1001 + static_cast<std::uint32_t>(req.size()), fin, {});
    return t;
}

ReplayResult replay_trace(const Trace& trace, RecordSink& sink, const ReplayOptions& options) {
    ReplayResult result;

    RedirectingSocketApi redirect(posix_sockets());
    std::vector<std::unique_ptr<TcpEchoServer>> listeners;
    std::vector<std::unique_ptr<DnsResponder>> resolvers;
    for (const auto& r : trace.responders) {
        switch (r.kind) {
        case ResponderSpec::Kind::Listen:
            listeners.push_back(std::make_unique<TcpEchoServer>());
            redirect.add(r.at, listeners.back()->endpoint());
            break;
        case ResponderSpec::Kind::Refuse:
            redirect.add(r.at, {Ipv4Addr(127, 0, 0, 1), unused_tcp_port()});
            break;
        case ResponderSpec::Kind::Dns: {
            DnsResponder::Options o;
            o.delay = r.delay;
            o.wrong_txn_first = r.wrong_txn_first;
            o.silent = r.silent;
            resolvers.push_back(std::make_unique<DnsResponder>(o));
            redirect.add(r.at, resolvers.back()->endpoint());
            break;
        }
        }
    }

    CountingSink counting(sink);
    auto tunnel = InMemoryTunnel::create();
    EngineDeps deps;
    deps.sockets = &redirect;
    deps.sink = &counting;
    deps.context = [ctx = options.context] { return ctx; };
    RelayOptions ro;
    ro.engine = options.engine;
    Relay relay(ro, tunnel.relay, deps);
    relay.start();

    // Relay-to-app side: learn each flow's handshake and sequence progress.
    struct FlowState {
        bool syn_ack = false;
        bool dead = false;
        std::uint32_t relay_next = 0;
    };
    std::mutex mu;
    std::condition_variable cv;
    std::map<FlowKey, FlowState> flows;
    std::atomic<bool> stopping{false};
    std::thread reader([&] {
        while (auto raw = tunnel.app->read_packet()) {
            if (is_shutdown_dummy(*raw)) {
                if (stopping) return;
                continue;
            }
            try {
                const IpPacket ip = parse_ipv4(*raw);
                if (ip.protocol != ipproto::kTcp) continue;
                const TcpSegment seg = parse_tcp(ip);
                const FlowKey key{ipproto::kTcp, ip.dst, seg.dst_port, ip.src, seg.src_port};
                std::lock_guard lk(mu);
                auto it = flows.find(key);
                if (it == flows.end()) continue;
                FlowState& st = it->second;
                if (seg.flags.rst) {
                    st.dead = true;
                } else if (seg.flags.syn && seg.flags.ack) {
                    st.syn_ack = true;
                    st.relay_next = seg.seq + 1;
                } else if (static_cast<std::int32_t>(seg.seq + seg.seq_length() - st.relay_next) > 0) {
                    st.relay_next = seg.seq + seg.seq_length();
                }
                cv.notify_all();
            } catch (const CodecException&) {
            }
        }
    });

    const Clock& clock = steady_clock();
    const std::int64_t start = clock.now_ns();
    for (const auto& frame : trace.frames) {
        sleep_until_ns(start + static_cast<std::int64_t>(frame.offset_us) * 1000);
        IpPacket ip;
        try {
            ip = parse_ipv4(frame.packet);
        } catch (const CodecException&) {
            tunnel.app->write_packet(frame.packet); // the relay counts it as malformed
            ++result.frames_injected;
            continue;
        }
        if (ip.protocol == ipproto::kUdp) {
            try {
                if (parse_udp(ip).dst_port == options.engine.dns_port) ++result.expected_records;
            } catch (const CodecException&) {
            }
            tunnel.app->write_packet(frame.packet);
            ++result.frames_injected;
            continue;
        }
        if (ip.protocol != ipproto::kTcp) {
            tunnel.app->write_packet(frame.packet);
            ++result.frames_injected;
            continue;
        }
        TcpSegment seg;
        try {
            seg = parse_tcp(ip);
        } catch (const CodecException&) {
            tunnel.app->write_packet(frame.packet);
            ++result.frames_injected;
            continue;
        }
        const FlowKey key{ipproto::kTcp, ip.src, seg.src_port, ip.dst, seg.dst_port};
        if (seg.flags.syn && !seg.flags.ack) {
            {
                std::lock_guard lk(mu);
                flows[key] = FlowState{};
            }
            ++result.expected_records;
            tunnel.app->write_packet(frame.packet);
            ++result.frames_injected;
            continue;
        }
        std::unique_lock lk(mu);
        auto it = flows.find(key);
        if (it == flows.end()) {
            ++result.frames_skipped;
            continue;
        }
        cv.wait_for(lk, options.gate_timeout, [&] { return it->second.syn_ack || it->second.dead; });
        if (!it->second.syn_ack || it->second.dead) {
            ++result.frames_skipped;
            continue;
        }
        if (seg.flags.ack) seg.ack = it->second.relay_next;
        lk.unlock();
        ip.payload = serialize_tcp(seg, ip.src, ip.dst);
        tunnel.app->write_packet(serialize_ipv4(ip));
        ++result.frames_injected;
    }

    counting.wait_for(result.expected_records, options.drain_timeout);
    relay.stop();
    stopping = true;
    tunnel.app->inject_dummy();
    reader.join();
    result.engine = relay.engine().stats();
    return result;
}

} // namespace flowlens
