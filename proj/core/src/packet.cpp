// SPDX-License-Identifier: Apache-2.0

#include "flowlens/packet.hpp"

#include <charconv>
#include <cstdio>

namespace flowlens {

const char* to_string(CodecError e) {
    switch (e) {
    case CodecError::Truncated: return "truncated";
    case CodecError::BadVersion: return "bad version";
    case CodecError::BadChecksum: return "bad checksum";
    case CodecError::BadLength: return "bad length";
    case CodecError::PayloadTooLarge: return "payload too large";
    case CodecError::MalformedName: return "malformed name";
    }
    return "unknown";
}

CodecException::CodecException(CodecError code) : std::runtime_error(to_string(code)), code_(code) {}

namespace {

[[noreturn]] void fail(CodecError e) { throw CodecException(e); }

bool parse_u32(std::string_view s, std::uint32_t& out, int base = 10) {
    if (s.empty()) return false;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), out, base);
    return ec == std::errc{} && p == s.data() + s.size();
}

} // namespace

std::optional<Ipv4Addr> Ipv4Addr::parse(std::string_view dotted) {
    std::uint32_t value = 0;
    for (int i = 0; i < 4; ++i) {
        auto dot = dotted.find('.');
        if ((i < 3) != (dot != std::string_view::npos)) return std::nullopt;
        std::uint32_t octet = 0;
        if (!parse_u32(dotted.substr(0, dot), octet) || octet > 255) return std::nullopt;
        value = (value << 8) | octet;
        dotted = i < 3 ? dotted.substr(dot + 1) : std::string_view{};
    }
    return Ipv4Addr{value};
}

std::string Ipv4Addr::to_string() const {
    char buf[16];
    std::snprintf(buf, sizeof buf, "%u.%u.%u.%u", value >> 24, (value >> 16) & 0xFF, (value >> 8) & 0xFF,
                  value & 0xFF);
    return buf;
}

std::optional<Endpoint> Endpoint::parse(std::string_view text) {
    auto colon = text.rfind(':');
    if (colon == std::string_view::npos) return std::nullopt;
    auto addr = Ipv4Addr::parse(text.substr(0, colon));
    std::uint32_t port = 0;
    if (!addr || !parse_u32(text.substr(colon + 1), port) || port > 65535) return std::nullopt;
    return Endpoint{*addr, static_cast<std::uint16_t>(port)};
}

std::string Endpoint::to_string() const { return addr.to_string() + ":" + std::to_string(port); }

void ChecksumAccumulator::add(ByteView bytes) {
    std::size_t i = 0;
    if (odd_ && !bytes.empty()) {
        sum_ += (std::uint32_t{pending_} << 8) | bytes[0];
        odd_ = false;
        i = 1;
    }
    for (; i + 1 < bytes.size(); i += 2) sum_ += (std::uint32_t{bytes[i]} << 8) | bytes[i + 1];
    if (i < bytes.size()) {
        pending_ = bytes[i];
        odd_ = true;
    }
}

std::uint16_t ChecksumAccumulator::finish() const {
    std::uint64_t s = sum_;
    if (odd_) s += std::uint32_t{pending_} << 8;
    while (s >> 16) s = (s & 0xFFFF) + (s >> 16);
    return static_cast<std::uint16_t>(~s & 0xFFFF);
}

std::uint16_t internet_checksum(ByteView bytes) {
    ChecksumAccumulator acc;
    acc.add(bytes);
    return acc.finish();
}

IpPacket parse_ipv4(ByteView bytes) {
    if (bytes.size() < kIpv4MinHeader) fail(CodecError::Truncated);
    if ((bytes[0] >> 4) != 4) fail(CodecError::BadVersion);
    const std::size_t ihl = static_cast<std::size_t>(bytes[0] & 0x0F) * 4;
    if (ihl < kIpv4MinHeader) fail(CodecError::BadLength);
    if (bytes.size() < ihl) fail(CodecError::Truncated);
    const std::size_t total = load_be16(bytes, 2);
    if (total < ihl) fail(CodecError::BadLength);
    if (bytes.size() < total) fail(CodecError::Truncated);
    if (internet_checksum(bytes.first(ihl)) != 0) fail(CodecError::BadChecksum);

    IpPacket p;
    p.tos = bytes[1];
    p.identification = load_be16(bytes, 4);
    p.flags_fragment = load_be16(bytes, 6);
    p.ttl = bytes[8];
    p.protocol = bytes[9];
    p.header_checksum = load_be16(bytes, 10);
    p.src = Ipv4Addr{load_be32(bytes, 12)};
    p.dst = Ipv4Addr{load_be32(bytes, 16)};
    p.options.assign(bytes.begin() + kIpv4MinHeader, bytes.begin() + static_cast<std::ptrdiff_t>(ihl));
    p.payload.assign(bytes.begin() + static_cast<std::ptrdiff_t>(ihl),
                     bytes.begin() + static_cast<std::ptrdiff_t>(total));
    return p;
}

Bytes serialize_ipv4(const IpPacket& packet) {
    if (packet.options.size() % 4 != 0 || packet.options.size() > 40) fail(CodecError::BadLength);
    const std::size_t hl = packet.header_length_bytes();
    const std::size_t total = packet.total_length_bytes();
    if (total > kMaxIpv4Total) fail(CodecError::PayloadTooLarge);

    Bytes out(total);
    out[0] = static_cast<std::uint8_t>(0x40 | (hl / 4));
    out[1] = packet.tos;
    store_be16(out, 2, static_cast<std::uint16_t>(total));
    store_be16(out, 4, packet.identification);
    store_be16(out, 6, packet.flags_fragment);
    out[8] = packet.ttl;
    out[9] = packet.protocol;
    store_be32(out, 12, packet.src.value);
    store_be32(out, 16, packet.dst.value);
    std::copy(packet.options.begin(), packet.options.end(), out.begin() + kIpv4MinHeader);
    store_be16(out, 10, internet_checksum(ByteView(out).first(hl)));
    std::copy(packet.payload.begin(), packet.payload.end(), out.begin() + static_cast<std::ptrdiff_t>(hl));
    return out;
}

std::uint8_t TcpFlags::bits() const {
    return static_cast<std::uint8_t>((fin ? 0x01 : 0) | (syn ? 0x02 : 0) | (rst ? 0x04 : 0) | (psh ? 0x08 : 0) |
                                     (ack ? 0x10 : 0) | (urg ? 0x20 : 0));
}

TcpFlags TcpFlags::from_bits(std::uint8_t b) {
    TcpFlags f;
    f.fin = b & 0x01;
    f.syn = b & 0x02;
    f.rst = b & 0x04;
    f.psh = b & 0x08;
    f.ack = b & 0x10;
    f.urg = b & 0x20;
    return f;
}

namespace {

std::uint16_t transport_checksum(std::uint8_t proto, Ipv4Addr src, Ipv4Addr dst, ByteView segment) {
    ChecksumAccumulator acc;
    acc.add32(src.value);
    acc.add32(dst.value);
    acc.add16(proto);
    acc.add16(static_cast<std::uint16_t>(segment.size()));
    acc.add(segment);
    return acc.finish();
}

} // namespace

TcpSegment parse_tcp(const IpPacket& ip) {
    const ByteView b(ip.payload);
    if (b.size() < kTcpMinHeader) fail(CodecError::Truncated);
    const std::size_t offset = static_cast<std::size_t>(b[12] >> 4) * 4;
    if (offset < kTcpMinHeader) fail(CodecError::BadLength);
    if (b.size() < offset) fail(CodecError::Truncated);
    if (transport_checksum(ipproto::kTcp, ip.src, ip.dst, b) != 0) fail(CodecError::BadChecksum);

    TcpSegment s;
    s.src_port = load_be16(b, 0);
    s.dst_port = load_be16(b, 2);
    s.seq = load_be32(b, 4);
    s.ack = load_be32(b, 8);
    s.flags = TcpFlags::from_bits(b[13]);
    s.window = load_be16(b, 14);
    s.urgent = load_be16(b, 18);

    for (std::size_t i = kTcpMinHeader; i < offset;) {
        const std::uint8_t kind = b[i];
        if (kind == 0) break;     // end of list
        if (kind == 1) {          // no-op
            ++i;
            continue;
        }
        if (i + 1 >= offset) fail(CodecError::BadLength);
        const std::size_t len = b[i + 1];
        if (len < 2 || i + len > offset) fail(CodecError::BadLength);
        if (kind == 2 && len == 4) s.mss = load_be16(b, i + 2);
        i += len;
    }
    s.payload.assign(b.begin() + static_cast<std::ptrdiff_t>(offset), b.end());
    return s;
}

Bytes serialize_tcp(const TcpSegment& seg, Ipv4Addr src, Ipv4Addr dst) {
    const std::size_t hl = kTcpMinHeader + (seg.mss ? 4 : 0);
    if (kIpv4MinHeader + hl + seg.payload.size() > kMaxIpv4Total) fail(CodecError::PayloadTooLarge);
    Bytes out(hl + seg.payload.size());
    store_be16(out, 0, seg.src_port);
    store_be16(out, 2, seg.dst_port);
    store_be32(out, 4, seg.seq);
    store_be32(out, 8, seg.ack);
    out[12] = static_cast<std::uint8_t>((hl / 4) << 4);
    out[13] = seg.flags.bits();
    store_be16(out, 14, seg.window);
    store_be16(out, 18, seg.urgent);
    if (seg.mss) {
        out[20] = 2;
        out[21] = 4;
        store_be16(out, 22, *seg.mss);
    }
    std::copy(seg.payload.begin(), seg.payload.end(), out.begin() + static_cast<std::ptrdiff_t>(hl));
    store_be16(out, 16, transport_checksum(ipproto::kTcp, src, dst, out));
    return out;
}

UdpDatagram parse_udp(const IpPacket& ip) {
    const ByteView b(ip.payload);
    if (b.size() < kUdpHeader) fail(CodecError::Truncated);
    const std::size_t length = load_be16(b, 4);
    if (length < kUdpHeader || length > b.size()) fail(CodecError::BadLength);
    const auto datagram = b.first(length);
    if (load_be16(b, 6) != 0 && transport_checksum(ipproto::kUdp, ip.src, ip.dst, datagram) != 0) {
        fail(CodecError::BadChecksum);
    }
    UdpDatagram d;
    d.src_port = load_be16(b, 0);
    d.dst_port = load_be16(b, 2);
    d.payload.assign(datagram.begin() + kUdpHeader, datagram.end());
    return d;
}

Bytes serialize_udp(const UdpDatagram& dgram, Ipv4Addr src, Ipv4Addr dst) {
    if (kIpv4MinHeader + dgram.length() > kMaxIpv4Total) fail(CodecError::PayloadTooLarge);
    Bytes out(dgram.length());
    store_be16(out, 0, dgram.src_port);
    store_be16(out, 2, dgram.dst_port);
    store_be16(out, 4, static_cast<std::uint16_t>(dgram.length()));
    std::copy(dgram.payload.begin(), dgram.payload.end(), out.begin() + kUdpHeader);
    std::uint16_t sum = transport_checksum(ipproto::kUdp, src, dst, out);
    store_be16(out, 6, sum == 0 ? 0xFFFF : sum);
    return out;
}

std::string FlowKey::to_string() const {
    const char* proto = protocol == ipproto::kTcp ? "tcp" : protocol == ipproto::kUdp ? "udp" : nullptr;
    std::string head = proto ? proto : std::to_string(protocol);
    return head + ":" + source().to_string() + ">" + destination().to_string();
}

std::optional<FlowKey> FlowKey::parse(std::string_view text) {
    auto colon = text.find(':');
    auto arrow = text.find('>');
    if (colon == std::string_view::npos || arrow == std::string_view::npos || arrow < colon) return std::nullopt;
    FlowKey k;
    auto proto = text.substr(0, colon);
    if (proto == "tcp") {
        k.protocol = ipproto::kTcp;
    } else if (proto == "udp") {
        k.protocol = ipproto::kUdp;
    } else {
        std::uint32_t p = 0;
        if (!parse_u32(proto, p) || p > 255) return std::nullopt;
        k.protocol = static_cast<std::uint8_t>(p);
    }
    auto src = Endpoint::parse(text.substr(colon + 1, arrow - colon - 1));
    auto dst = Endpoint::parse(text.substr(arrow + 1));
    if (!src || !dst) return std::nullopt;
    k.src_addr = src->addr;
    k.src_port = src->port;
    k.dst_addr = dst->addr;
    k.dst_port = dst->port;
    return k;
}

FlowKey flow_key_of(const IpPacket& ip) {
    if (ip.protocol != ipproto::kTcp && ip.protocol != ipproto::kUdp) fail(CodecError::Truncated);
    const std::size_t need = ip.protocol == ipproto::kTcp ? kTcpMinHeader : kUdpHeader;
    if (ip.payload.size() < need) fail(CodecError::Truncated);
    return FlowKey{ip.protocol, ip.src, load_be16(ip.payload, 0), ip.dst, load_be16(ip.payload, 2)};
}

DnsHeader parse_dns_header(ByteView payload) {
    if (payload.size() < kDnsHeader) fail(CodecError::Truncated);
    DnsHeader h;
    h.txn_id = load_be16(payload, 0);
    h.is_response = (payload[2] & 0x80) != 0;
    const std::uint16_t qdcount = load_be16(payload, 4);
    if (qdcount == 0) return h;

    std::size_t i = kDnsHeader;
    std::size_t name_len = 0;
    for (;;) {
        if (i >= payload.size()) fail(CodecError::Truncated);
        const std::uint8_t len = payload[i++];
        if (len == 0) break;
        if ((len & 0xC0) != 0) fail(CodecError::MalformedName); // pointers are not expected in a question
        if (i + len > payload.size()) fail(CodecError::Truncated);
        name_len += len + 1;
        if (name_len > 255) fail(CodecError::MalformedName);
        if (!h.question_name.empty()) h.question_name.push_back('.');
        h.question_name.append(reinterpret_cast<const char*>(payload.data() + i), len);
        i += len;
    }
    return h;
}

IpPacket make_tcp_packet(Ipv4Addr src, Ipv4Addr dst, const TcpSegment& seg) {
    IpPacket p;
    p.protocol = ipproto::kTcp;
    p.src = src;
    p.dst = dst;
    p.payload = serialize_tcp(seg, src, dst);
    return p;
}

IpPacket make_udp_packet(Ipv4Addr src, Ipv4Addr dst, const UdpDatagram& dgram) {
    IpPacket p;
    p.protocol = ipproto::kUdp;
    p.src = src;
    p.dst = dst;
    p.payload = serialize_udp(dgram, src, dst);
    return p;
}

Bytes build_dns_query(std::uint16_t txn_id, std::string_view name) {
    Bytes out;
    append_be16(out, txn_id);
    append_be16(out, 0x0100); // RD
    append_be16(out, 1);
    append_be16(out, 0);
    append_be16(out, 0);
    append_be16(out, 0);
    while (!name.empty()) {
        auto dot = name.find('.');
        auto label = name.substr(0, dot);
        if (label.empty() || label.size() > 63) throw CodecException(CodecError::MalformedName);
        out.push_back(static_cast<std::uint8_t>(label.size()));
        out.insert(out.end(), label.begin(), label.end());
        name = dot == std::string_view::npos ? std::string_view{} : name.substr(dot + 1);
    }
    out.push_back(0);
    append_be16(out, 1); // A
    append_be16(out, 1); // IN
    return out;
}

} // namespace flowlens
