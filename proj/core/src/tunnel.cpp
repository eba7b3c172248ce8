// SPDX-License-Identifier: Apache-2.0

#include "flowlens/tunnel.hpp"

#include <arpa/inet.h>
#include <fcntl.h>
#include <linux/if.h>
#include <linux/if_tun.h>
#include <netinet/in.h>
#include <poll.h>
#include <sys/eventfd.h>
#include <sys/ioctl.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <cstring>

#include "flowlens/instrument.hpp"

namespace flowlens {

namespace {

constexpr Ipv4Addr kLoopback{127, 0, 0, 1};
constexpr std::uint16_t kDummyTunPort = 9;

} // namespace

Bytes make_shutdown_dummy() {
    UdpDatagram d;
    d.src_port = 0;
    d.dst_port = 0;
    d.payload.assign(std::begin(kDummyMagic), std::end(kDummyMagic));
    return serialize_ipv4(make_udp_packet(kLoopback, kLoopback, d));
}

bool is_shutdown_dummy(ByteView packet) {
    try {
        const IpPacket ip = parse_ipv4(packet);
        if (ip.protocol != ipproto::kUdp || ip.payload.size() != kUdpHeader + sizeof kDummyMagic) return false;
        const std::uint16_t dst_port = load_be16(ip.payload, 2);
        const bool reserved = (ip.dst == kLoopback && dst_port == 0) || dst_port == kDummyTunPort;
        return reserved && std::equal(std::begin(kDummyMagic), std::end(kDummyMagic), ip.payload.begin() + kUdpHeader);
    } catch (const CodecException&) {
        return false;
    }
}

void PacketChannel::push(Bytes packet) {
    {
        std::lock_guard lk(mu_);
        if (closed_) return;
        items_.push_back(std::move(packet));
    }
    pushed_.fetch_add(1);
    cv_.notify_one();
}

std::optional<Bytes> PacketChannel::pop_blocking() {
    std::unique_lock lk(mu_);
    while (items_.empty() && !closed_) {
        cv_.wait(lk);
        if (items_.empty() && !closed_) wakeups_.fetch_add(1);
    }
    wakeups_.fetch_add(1);
    if (items_.empty()) return std::nullopt;
    Bytes out = std::move(items_.front());
    items_.pop_front();
    return out;
}

std::optional<Bytes> PacketChannel::try_pop() {
    std::lock_guard lk(mu_);
    if (items_.empty()) return std::nullopt;
    Bytes out = std::move(items_.front());
    items_.pop_front();
    return out;
}

void PacketChannel::close() {
    {
        std::lock_guard lk(mu_);
        closed_ = true;
    }
    cv_.notify_all();
}

bool PacketChannel::closed() const {
    std::lock_guard lk(mu_);
    return closed_;
}

void InMemoryEndpoint::write_packet(ByteView packet) {
    if (out_->closed()) throw EndpointClosed();
    out_->push(Bytes(packet.begin(), packet.end()));
}

void InMemoryEndpoint::close() {
    in_->close();
    out_->close();
}

InMemoryTunnel InMemoryTunnel::create() {
    auto to_relay = std::make_shared<PacketChannel>();
    auto to_app = std::make_shared<PacketChannel>();
    return {std::make_shared<InMemoryEndpoint>(to_relay, to_app), std::make_shared<InMemoryEndpoint>(to_app, to_relay)};
}

// --- OS TUN device -----------------------------------------------------------

namespace {

void set_if_addr(int sock, const std::string& name, unsigned long request, Ipv4Addr addr) {
    ifreq ifr{};
    std::strncpy(ifr.ifr_name, name.c_str(), IFNAMSIZ - 1);
    sockaddr_in sa = to_sockaddr({addr, 0});
    std::memcpy(&ifr.ifr_addr, &sa, sizeof sa);
    if (::ioctl(sock, request, &ifr) < 0) throw TunOpenError("ioctl on " + name + ": " + std::strerror(errno));
}

} // namespace

OsTunDevice::OsTunDevice(const TunConfig& config) : config_(config) {
    if (config.ifname.empty() || config.ifname.size() >= IFNAMSIZ) {
        throw TunOpenError("invalid interface name '" + config.ifname + "'");
    }
    fd_.reset(::open("/dev/net/tun", O_RDWR | O_CLOEXEC));
    if (!fd_) throw TunOpenError(std::string("open /dev/net/tun: ") + std::strerror(errno));

    ifreq ifr{};
    ifr.ifr_flags = IFF_TUN | IFF_NO_PI;
    std::strncpy(ifr.ifr_name, config.ifname.c_str(), IFNAMSIZ - 1);
    if (::ioctl(fd_.get(), TUNSETIFF, &ifr) < 0) {
        throw TunOpenError("TUNSETIFF " + config.ifname + ": " + std::strerror(errno));
    }
    name_ = ifr.ifr_name;

    UniqueFd sock(::socket(AF_INET, SOCK_DGRAM | SOCK_CLOEXEC, 0));
    if (!sock) throw TunOpenError(std::string("socket: ") + std::strerror(errno));
    set_if_addr(sock.get(), name_, SIOCSIFADDR, config.address);
    const std::uint32_t mask = config.prefix_len == 0 ? 0 : ~std::uint32_t{0} << (32 - config.prefix_len);
    set_if_addr(sock.get(), name_, SIOCSIFNETMASK, Ipv4Addr(mask));

    ifreq mtu{};
    std::strncpy(mtu.ifr_name, name_.c_str(), IFNAMSIZ - 1);
    mtu.ifr_mtu = config.mtu;
    if (::ioctl(sock.get(), SIOCSIFMTU, &mtu) < 0) throw TunOpenError(std::string("SIOCSIFMTU: ") + std::strerror(errno));

    ifreq flags{};
    std::strncpy(flags.ifr_name, name_.c_str(), IFNAMSIZ - 1);
    if (::ioctl(sock.get(), SIOCGIFFLAGS, &flags) < 0) {
        throw TunOpenError(std::string("SIOCGIFFLAGS: ") + std::strerror(errno));
    }
    flags.ifr_flags |= IFF_UP | IFF_RUNNING;
    if (::ioctl(sock.get(), SIOCSIFFLAGS, &flags) < 0) {
        throw TunOpenError(std::string("SIOCSIFFLAGS: ") + std::strerror(errno));
    }
}

OsTunDevice::~OsTunDevice() = default;

std::optional<Bytes> OsTunDevice::read_packet() {
    Bytes buf(65535);
    while (!closed_.load()) {
        const ssize_t n = ::read(fd_.get(), buf.data(), buf.size());
        if (n > 0) {
            buf.resize(static_cast<std::size_t>(n));
            return buf;
        }
        if (n < 0 && errno == EINTR) continue;
        if (n < 0 && errno == EAGAIN) continue;
        return std::nullopt;
    }
    return std::nullopt;
}

std::optional<Bytes> OsTunDevice::try_read_packet() {
    if (closed_.load()) return std::nullopt;
    pollfd p{fd_.get(), POLLIN, 0};
    if (::poll(&p, 1, 0) <= 0 || (p.revents & POLLIN) == 0) return std::nullopt;
    Bytes buf(65535);
    const ssize_t n = ::read(fd_.get(), buf.data(), buf.size());
    if (n <= 0) return std::nullopt;
    buf.resize(static_cast<std::size_t>(n));
    return buf;
}

void OsTunDevice::write_packet(ByteView packet) {
    if (closed_.load()) throw EndpointClosed();
    const ssize_t n = ::write(fd_.get(), packet.data(), packet.size());
    if (n < 0) throw errno_error("write to tun");
}

void OsTunDevice::inject_dummy() {
    // The kernel routes a datagram for the device's subnet into the device,
    // which is what unblocks the pending read().
    UniqueFd sock(::socket(AF_INET, SOCK_DGRAM | SOCK_CLOEXEC, 0));
    if (!sock) throw errno_error("dummy socket");
    const sockaddr_in sa = to_sockaddr({config_.dummy_peer, kDummyTunPort});
    if (::sendto(sock.get(), kDummyMagic, sizeof kDummyMagic, 0, reinterpret_cast<const sockaddr*>(&sa), sizeof sa) < 0) {
        throw errno_error("dummy sendto");
    }
}

void OsTunDevice::close() { closed_.store(true); }

// --- Write queue -------------------------------------------------------------

const char* to_string(WriteScheme s) {
    switch (s) {
    case WriteScheme::QueueWriteCounter: return "counter";
    case WriteScheme::QueueWritePlain: return "plain";
    }
    return "?";
}

WriteQueue::WriteQueue(WriteScheme scheme, std::uint32_t spin_threshold) : scheme_(scheme) {
    counter_.threshold = spin_threshold;
}

WriteQueue::~WriteQueue() { close(); }

std::int64_t WriteQueue::enqueue(Bytes packet) {
    const Clock& clock = steady_clock();
    const std::int64_t start = clock.now_ns();
    if (closed_.load()) throw QueueClosed();
    QueuedPacket item{std::move(packet), start};

    if (scheme_ == WriteScheme::QueueWritePlain) {
        std::lock_guard lk(mu_);
        locked_.push_back(std::move(item));
        enqueued_.fetch_add(1, std::memory_order_relaxed);
        if (parked_.load(std::memory_order_relaxed)) unparks_.fetch_add(1, std::memory_order_relaxed);
        notifies_.fetch_add(1, std::memory_order_relaxed);
        cv_.notify_one();
    } else {
        lockfree_.push(std::move(item));
        enqueued_.fetch_add(1, std::memory_order_relaxed);
        std::atomic_thread_fence(std::memory_order_seq_cst);
        if (parked_.load(std::memory_order_seq_cst)) {
            std::lock_guard lk(mu_);
            if (parked_.load()) {
                parked_.store(false);
                unparks_.fetch_add(1, std::memory_order_relaxed);
                notifies_.fetch_add(1, std::memory_order_relaxed);
                cv_.notify_one();
            }
        }
    }
    return clock.now_ns() - start;
}

std::optional<QueuedPacket> WriteQueue::dequeue() {
    return scheme_ == WriteScheme::QueueWritePlain ? dequeue_plain() : dequeue_counter();
}

std::optional<QueuedPacket> WriteQueue::dequeue_plain() {
    std::unique_lock lk(mu_);
    while (locked_.empty()) {
        if (closed_.load()) return std::nullopt;
        parked_.store(true);
        parks_.fetch_add(1, std::memory_order_relaxed);
        cv_.wait(lk);
        parked_.store(false);
    }
    QueuedPacket out = std::move(locked_.front());
    locked_.pop_front();
    dequeued_.fetch_add(1, std::memory_order_relaxed);
    return out;
}

std::optional<QueuedPacket> WriteQueue::dequeue_counter() {
    while (true) {
        if (auto item = lockfree_.try_pop()) {
            counter_.on_nonempty();
            counter_mirror_.store(counter_.value, std::memory_order_relaxed);
            dequeued_.fetch_add(1, std::memory_order_relaxed);
            return item;
        }
        if (closed_.load()) {
            if (lockfree_.empty()) return std::nullopt;
            std::this_thread::yield();
            continue;
        }
        counter_.on_empty();
        counter_mirror_.store(counter_.value, std::memory_order_relaxed);
        if (counter_.should_park()) {
            park();
            counter_.on_wake();
            counter_mirror_.store(counter_.value, std::memory_order_relaxed);
        } else {
            std::this_thread::yield();
        }
    }
}

void WriteQueue::park() {
    std::unique_lock lk(mu_);
    parked_.store(true, std::memory_order_seq_cst);
    std::atomic_thread_fence(std::memory_order_seq_cst);
    if (!lockfree_.empty() || closed_.load()) {
        parked_.store(false);
        return;
    }
    parks_.fetch_add(1, std::memory_order_relaxed);
    cv_.wait(lk, [this] { return !parked_.load(); });
}

void WriteQueue::close() {
    closed_.store(true);
    {
        std::lock_guard lk(mu_);
        parked_.store(false);
    }
    cv_.notify_all();
}

WriteQueueStats WriteQueue::stats() const {
    return {enqueued_.load(), dequeued_.load(), parks_.load(), unparks_.load(), notifies_.load()};
}

// --- Read queue --------------------------------------------------------------

ReadQueue::ReadQueue() : efd_(::eventfd(0, EFD_NONBLOCK | EFD_CLOEXEC)) {
    if (!efd_) throw errno_error("eventfd");
}

void ReadQueue::push(Bytes packet) {
    {
        std::lock_guard lk(mu_);
        items_.push_back(std::move(packet));
    }
    pushes_.fetch_add(1);
    const std::uint64_t one = 1;
    if (::write(efd_.get(), &one, sizeof one) == sizeof one) signals_.fetch_add(1);
}

std::vector<Bytes> ReadQueue::drain() {
    std::lock_guard lk(mu_);
    std::vector<Bytes> out(std::make_move_iterator(items_.begin()), std::make_move_iterator(items_.end()));
    items_.clear();
    return out;
}

std::uint64_t ReadQueue::consume_signal() {
    std::uint64_t value = 0;
    if (::read(efd_.get(), &value, sizeof value) != sizeof value) return 0;
    return value;
}

// --- Workers -----------------------------------------------------------------

TunnelIo::TunnelIo(std::shared_ptr<TunnelEndpoint> endpoint, ReadQueue& reads, WriteQueue& writes)
    : endpoint_(std::move(endpoint)), reads_(reads), writes_(writes) {}

TunnelIo::~TunnelIo() {
    stop_reader();
    stop_writer();
}

void TunnelIo::start() {
    reader_ = std::thread([this] { reader_loop(); });
    writer_ = std::thread([this] { writer_loop(); });
}

void TunnelIo::reader_loop() {
    set_worker_role(WorkerRole::TunnelReader);
    while (true) {
        std::optional<Bytes> pkt = endpoint_->read_packet();
        if (!pkt) {
            // The device went away; tell the main worker the same way a
            // requested shutdown does.
            reads_.push(make_shutdown_dummy());
            return;
        }
        if (is_shutdown_dummy(*pkt)) {
            if (!stop_requested_.load()) continue;
            dummy_seen_.store(true);
            reads_.push(std::move(*pkt));
            return;
        }
        packets_read_.fetch_add(1);
        reads_.push(std::move(*pkt));
    }
}

void TunnelIo::writer_loop() {
    set_worker_role(WorkerRole::TunnelWriter);
    while (auto item = writes_.dequeue()) {
        try {
            endpoint_->write_packet(item->packet);
            packets_written_.fetch_add(1);
        } catch (const std::exception&) {
            // Peer gone; keep draining so producers never block.
        }
    }
}

ShutdownResult TunnelIo::stop_reader() {
    std::lock_guard lk(stop_mu_);
    if (reader_stopped_ || !reader_.joinable()) {
        reader_stopped_ = true;
        return ShutdownResult::AlreadyStopped;
    }
    stop_requested_.store(true);
    try {
        endpoint_->inject_dummy();
    } catch (const std::exception&) {
        endpoint_->close();
    }
    reader_.join();
    reader_stopped_ = true;
    return ShutdownResult::Stopped;
}

void TunnelIo::stop_writer() {
    writes_.close();
    if (writer_.joinable()) writer_.join();
}

} // namespace flowlens
