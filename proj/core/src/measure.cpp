// SPDX-License-Identifier: Apache-2.0

#include "flowlens/measure.hpp"

#include <netinet/in.h>
#include <openssl/evp.h>
#include <sys/time.h>

#include <cerrno>

#include "flowlens/instrument.hpp"

namespace flowlens {

const char* to_string(MeasureKind k) {
    switch (k) {
    case MeasureKind::TcpConnect: return "TcpConnect";
    case MeasureKind::Dns: return "Dns";
    }
    return "?";
}

const char* to_string(Outcome o) {
    switch (o) {
    case Outcome::Success: return "Success";
    case Outcome::Refused: return "Refused";
    case Outcome::Timeout: return "Timeout";
    case Outcome::Unreachable: return "Unreachable";
    }
    return "?";
}

const char* to_string(NetworkType t) {
    switch (t) {
    case NetworkType::Wifi: return "Wifi";
    case NetworkType::Cellular2G: return "Cellular2G";
    case NetworkType::Cellular3G: return "Cellular3G";
    case NetworkType::CellularLTE: return "CellularLTE";
    case NetworkType::Wired: return "Wired";
    case NetworkType::Unknown: return "Unknown";
    }
    return "?";
}

std::optional<MeasureKind> parse_measure_kind(std::string_view s) {
    for (auto k : {MeasureKind::TcpConnect, MeasureKind::Dns}) {
        if (s == to_string(k)) return k;
    }
    return std::nullopt;
}

std::optional<Outcome> parse_outcome(std::string_view s) {
    for (auto o : {Outcome::Success, Outcome::Refused, Outcome::Timeout, Outcome::Unreachable}) {
        if (s == to_string(o)) return o;
    }
    return std::nullopt;
}

std::optional<NetworkType> parse_network_type(std::string_view s) {
    for (auto t : {NetworkType::Wifi, NetworkType::Cellular2G, NetworkType::Cellular3G, NetworkType::CellularLTE,
                   NetworkType::Wired, NetworkType::Unknown}) {
        if (s == to_string(t)) return t;
    }
    return std::nullopt;
}

namespace {

timeval to_timeval(std::chrono::nanoseconds d) {
    if (d.count() < 1000) d = std::chrono::microseconds(1);
    timeval tv{};
    tv.tv_sec = static_cast<time_t>(d.count() / 1'000'000'000);
    tv.tv_usec = static_cast<suseconds_t>((d.count() % 1'000'000'000) / 1000);
    return tv;
}

Outcome classify_connect_error(int err) {
    switch (err) {
    case ECONNREFUSED:
        return Outcome::Refused;
    case EINPROGRESS:
    case ETIMEDOUT:
    case EAGAIN:
        return Outcome::Timeout;
    default:
        return Outcome::Unreachable;
    }
}

std::int64_t ns_to_us(std::int64_t ns) { return (ns + 500) / 1000; }

} // namespace

ConnectResult timed_connect(SocketApi& api, const Clock& clock, const Endpoint& dst, std::chrono::milliseconds timeout,
                            const SocketMark& mark, const std::function<void(int)>& on_socket) {
    ConnectResult res;
    const int fd = api.socket(AF_INET, SOCK_STREAM | SOCK_CLOEXEC, 0);
    if (fd < 0) {
        res.error = errno;
        res.timing.outcome = Outcome::Unreachable;
        return res;
    }
    UniqueFd sock(fd);
    if (on_socket) on_socket(fd);
    if (const int err = apply_socket_mark(api, fd, mark); err != 0) {
        res.error = err;
        res.timing.outcome = Outcome::Unreachable;
        res.fd = std::move(sock);
        return res;
    }
    const timeval tv = to_timeval(timeout);
    api.setsockopt(fd, SOL_SOCKET, SO_SNDTIMEO, &tv, sizeof tv);
    const sockaddr_in sa = to_sockaddr(dst);
    note_guarded_op(GuardedOp::BlockingConnect);

    const std::int64_t before = clock.now_ns();
    const int rc = api.connect(fd, reinterpret_cast<const sockaddr*>(&sa), sizeof sa);
    const std::int64_t after = clock.now_ns();
    const int err = errno;

    res.fd = std::move(sock);
    if (rc == 0) {
        res.timing.outcome = Outcome::Success;
        res.timing.rtt_us = ns_to_us(after - before);
    } else {
        res.error = err;
        res.timing.outcome = classify_connect_error(err);
    }
    return res;
}

DnsResult timed_dns(SocketApi& api, const Clock& clock, ByteView query, const Endpoint& resolver,
                    std::chrono::milliseconds timeout, const std::function<void(ByteView)>& on_unmatched,
                    const std::function<void(int)>& on_socket) {
    DnsResult res;
    if (query.size() < kDnsHeader) {
        res.error = EINVAL;
        res.timing.outcome = Outcome::Unreachable;
        return res;
    }
    const std::uint16_t txn = load_be16(query, 0);
    const int fd = api.socket(AF_INET, SOCK_DGRAM | SOCK_CLOEXEC, 0);
    if (fd < 0) {
        res.error = errno;
        res.timing.outcome = Outcome::Unreachable;
        return res;
    }
    res.fd.reset(fd);
    if (on_socket) on_socket(fd);
    const sockaddr_in to = to_sockaddr(resolver);
    note_guarded_op(GuardedOp::DnsReceive);

    Bytes buf(65535);
    const std::int64_t deadline = clock.now_ns() + std::chrono::nanoseconds(timeout).count();
    const std::int64_t sent_at = clock.now_ns();
    if (api.sendto(fd, query.data(), query.size(), 0, reinterpret_cast<const sockaddr*>(&to), sizeof to) < 0) {
        res.error = errno;
        res.timing.outcome = Outcome::Unreachable;
        return res;
    }
    while (true) {
        const std::int64_t remaining = deadline - clock.now_ns();
        if (remaining <= 0) {
            res.timing.outcome = Outcome::Timeout;
            return res;
        }
        const timeval tv = to_timeval(std::chrono::nanoseconds(remaining));
        api.setsockopt(fd, SOL_SOCKET, SO_RCVTIMEO, &tv, sizeof tv);
        sockaddr_in from{};
        socklen_t from_len = sizeof from;
        const ssize_t n = api.recvfrom(fd, buf.data(), buf.size(), 0, reinterpret_cast<sockaddr*>(&from), &from_len);
        const std::int64_t received_at = clock.now_ns();
        if (n < 0) {
            if (errno == EAGAIN || errno == EWOULDBLOCK || errno == EINTR) continue;
            res.error = errno;
            res.timing.outcome = Outcome::Unreachable;
            return res;
        }
        if (n == 0) {
            // Socket shut down underneath us (relay stopping).
            res.error = ECANCELED;
            res.timing.outcome = Outcome::Timeout;
            return res;
        }
        if (from_sockaddr(from) != resolver) continue;
        const ByteView reply(buf.data(), static_cast<std::size_t>(n));
        const bool is_response = reply.size() >= kDnsHeader && (reply[2] & 0x80) != 0;
        if (is_response && load_be16(reply, 0) == txn) {
            res.timing.outcome = Outcome::Success;
            res.timing.rtt_us = ns_to_us(received_at - sent_at);
            res.reply.assign(reply.begin(), reply.end());
            return res;
        }
        ++res.unmatched;
        if (on_unmatched) on_unmatched(reply);
    }
}

std::string device_id_digest(std::string_view device_id, ByteView salt) {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_MD_CTX* ctx = EVP_MD_CTX_new();
    EVP_DigestInit_ex(ctx, EVP_sha1(), nullptr);
    EVP_DigestUpdate(ctx, salt.data(), salt.size());
    EVP_DigestUpdate(ctx, device_id.data(), device_id.size());
    EVP_DigestFinal_ex(ctx, md, &len);
    EVP_MD_CTX_free(ctx);
    static const char* kHex = "0123456789abcdef";
    std::string out;
    out.reserve(len * 2);
    for (unsigned int i = 0; i < len; ++i) {
        out.push_back(kHex[md[i] >> 4]);
        out.push_back(kHex[md[i] & 0xF]);
    }
    return out;
}

MeasurementRecord make_record(MeasureKind kind, const AppIdentity& app, const FlowKey& flow, const Timing& timing,
                              const RecordContext& context, std::string domain) {
    MeasurementRecord r;
    r.kind = kind;
    r.app = app;
    r.flow = flow;
    r.domain = std::move(domain);
    r.outcome = timing.outcome;
    if (timing.outcome == Outcome::Success) r.rtt_us = timing.rtt_us;
    r.network_type = context.network_type;
    r.network_label = context.network_label;
    r.taken_at = monotonic_wall_us();
    r.session_id = context.session_id;
    r.device_id_hash = context.device_id_hash;
    return r;
}

} // namespace flowlens
