// SPDX-License-Identifier: Apache-2.0
//
// Wire codec for the packets that cross the tunnel: IPv4, TCP, UDP and the
// leading part of a DNS message. Everything here is a pure function over
// byte sequences and safe to call from any thread.

#pragma once

#include <compare>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>

#include "flowlens/bytes.hpp"

namespace flowlens {

enum class CodecError {
    Truncated,
    BadVersion,
    BadChecksum,
    BadLength,
    PayloadTooLarge,
    MalformedName,
};

const char* to_string(CodecError e);

class CodecException : public std::runtime_error {
public:
    explicit CodecException(CodecError code);
    CodecError code() const noexcept { return code_; }

private:
    CodecError code_;
};

// IPv4 address in host byte order.
struct Ipv4Addr {
    std::uint32_t value = 0;

    constexpr Ipv4Addr() = default;
    constexpr explicit Ipv4Addr(std::uint32_t v) : value(v) {}
    constexpr Ipv4Addr(std::uint8_t a, std::uint8_t b, std::uint8_t c, std::uint8_t d)
        : value((std::uint32_t{a} << 24) | (std::uint32_t{b} << 16) | (std::uint32_t{c} << 8) | d) {}

    static std::optional<Ipv4Addr> parse(std::string_view dotted);
    std::string to_string() const;

    auto operator<=>(const Ipv4Addr&) const = default;
};

struct Endpoint {
    Ipv4Addr addr;
    std::uint16_t port = 0;

    static std::optional<Endpoint> parse(std::string_view text); // "a.b.c.d:port"
    std::string to_string() const;
    auto operator<=>(const Endpoint&) const = default;
};

namespace ipproto {
inline constexpr std::uint8_t kTcp = 6;
inline constexpr std::uint8_t kUdp = 17;
} // namespace ipproto

inline constexpr std::size_t kIpv4MinHeader = 20;
inline constexpr std::size_t kTcpMinHeader = 20;
inline constexpr std::size_t kUdpHeader = 8;
inline constexpr std::size_t kDnsHeader = 12;
inline constexpr std::size_t kMaxIpv4Total = 65535;

struct IpPacket {
    std::uint8_t tos = 0;
    std::uint16_t identification = 0;
    std::uint16_t flags_fragment = 0x4000; // DF, offset 0
    std::uint8_t ttl = 64;
    std::uint8_t protocol = 0;
    std::uint16_t header_checksum = 0; // as carried on the wire; recomputed by serialize
    Ipv4Addr src;
    Ipv4Addr dst;
    Bytes options; // opaque, length multiple of 4
    Bytes payload;

    std::size_t header_length_bytes() const { return kIpv4MinHeader + options.size(); }
    std::size_t total_length_bytes() const { return header_length_bytes() + payload.size(); }
    bool more_fragments() const { return (flags_fragment & 0x2000) != 0; }
    std::uint16_t fragment_offset() const { return flags_fragment & 0x1FFF; }
    bool is_fragment() const { return more_fragments() || fragment_offset() != 0; }

    // Field-wise, except the carried checksum, which is derived data.
    bool operator==(const IpPacket& o) const {
        return tos == o.tos && identification == o.identification && flags_fragment == o.flags_fragment &&
               ttl == o.ttl && protocol == o.protocol && src == o.src && dst == o.dst && options == o.options &&
               payload == o.payload;
    }
};

// Rejects short input, non-v4 versions, inconsistent lengths and bad header
// checksums. Trailing bytes beyond total length are ignored.
IpPacket parse_ipv4(ByteView bytes);

// Emits the packet with a freshly computed header checksum.
Bytes serialize_ipv4(const IpPacket& packet);

// RFC 1071 ones-complement checksum; odd lengths are padded with a zero byte.
std::uint16_t internet_checksum(ByteView bytes);

// Running ones-complement sum, used for pseudo-header checksums.
class ChecksumAccumulator {
public:
    void add(ByteView bytes);
    void add16(std::uint16_t word) { sum_ += word; }
    void add32(std::uint32_t word) {
        add16(static_cast<std::uint16_t>(word >> 16));
        add16(static_cast<std::uint16_t>(word));
    }
    std::uint16_t finish() const;

private:
    std::uint64_t sum_ = 0;
    bool odd_ = false;
    std::uint8_t pending_ = 0;
};

struct TcpFlags {
    bool fin = false;
    bool syn = false;
    bool rst = false;
    bool psh = false;
    bool ack = false;
    bool urg = false;

    std::uint8_t bits() const;
    static TcpFlags from_bits(std::uint8_t b);
    bool operator==(const TcpFlags&) const = default;
};

struct TcpSegment {
    std::uint16_t src_port = 0;
    std::uint16_t dst_port = 0;
    std::uint32_t seq = 0;
    std::uint32_t ack = 0;
    TcpFlags flags;
    std::uint16_t window = 0;
    std::uint16_t urgent = 0;
    std::optional<std::uint16_t> mss;
    Bytes payload;

    // Sequence space consumed: payload plus one each for SYN and FIN.
    std::uint32_t seq_length() const {
        return static_cast<std::uint32_t>(payload.size()) + (flags.syn ? 1u : 0u) + (flags.fin ? 1u : 0u);
    }
    bool is_pure_ack() const {
        return payload.empty() && flags.ack && !flags.syn && !flags.fin && !flags.rst;
    }

    bool operator==(const TcpSegment&) const = default;
};

// Parses the TCP header carried by `ip` and validates its checksum against
// the IPv4 pseudo-header. Options other than MSS are skipped.
TcpSegment parse_tcp(const IpPacket& ip);

// Serializes a segment (header + MSS option if present + payload) with a
// checksum computed over the pseudo-header for src/dst.
Bytes serialize_tcp(const TcpSegment& seg, Ipv4Addr src, Ipv4Addr dst);

struct UdpDatagram {
    std::uint16_t src_port = 0;
    std::uint16_t dst_port = 0;
    Bytes payload;

    std::size_t length() const { return kUdpHeader + payload.size(); }
    bool operator==(const UdpDatagram&) const = default;
};

// A zero checksum means "not computed" and is accepted.
UdpDatagram parse_udp(const IpPacket& ip);
Bytes serialize_udp(const UdpDatagram& dgram, Ipv4Addr src, Ipv4Addr dst);

struct FlowKey {
    std::uint8_t protocol = 0;
    Ipv4Addr src_addr;
    std::uint16_t src_port = 0;
    Ipv4Addr dst_addr;
    std::uint16_t dst_port = 0;

    Endpoint source() const { return {src_addr, src_port}; }
    Endpoint destination() const { return {dst_addr, dst_port}; }
    FlowKey reversed() const { return {protocol, dst_addr, dst_port, src_addr, src_port}; }
    std::string to_string() const; // "tcp:10.0.0.2:40000>93.184.216.34:80"
    static std::optional<FlowKey> parse(std::string_view text);

    auto operator<=>(const FlowKey&) const = default;
};

// Reads the 5-tuple from a TCP or UDP packet without validating payload
// checksums. Throws Truncated for other protocols or short transport headers.
FlowKey flow_key_of(const IpPacket& ip);

struct DnsHeader {
    std::uint16_t txn_id = 0;
    bool is_response = false;
    std::string question_name;

    bool operator==(const DnsHeader&) const = default;
};

DnsHeader parse_dns_header(ByteView payload);

// Convenience wrappers: wrap a transport payload into a full IPv4 packet.
IpPacket make_tcp_packet(Ipv4Addr src, Ipv4Addr dst, const TcpSegment& seg);
IpPacket make_udp_packet(Ipv4Addr src, Ipv4Addr dst, const UdpDatagram& dgram);

// Standard recursive A query for `name`, used by the self-test client and
// trace authoring.
Bytes build_dns_query(std::uint16_t txn_id, std::string_view name);

} // namespace flowlens
