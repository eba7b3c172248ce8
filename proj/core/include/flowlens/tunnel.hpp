// SPDX-License-Identifier: Apache-2.0
//
// Tunnel I/O: endpoints (OS TUN device or an in-process pair), the reader
// and writer workers, and the two queues between them and the main worker.

#pragma once

#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <memory>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "flowlens/bytes.hpp"
#include "flowlens/packet.hpp"
#include "flowlens/sys.hpp"

namespace flowlens {

class EndpointClosed : public std::runtime_error {
public:
    EndpointClosed() : std::runtime_error("tunnel endpoint closed") {}
};

class QueueClosed : public std::runtime_error {
public:
    QueueClosed() : std::runtime_error("queue closed") {}
};

class TunnelEndpoint {
public:
    virtual ~TunnelEndpoint() = default;
    // Blocks until a whole packet is available; nullopt once closed.
    virtual std::optional<Bytes> read_packet() = 0;
    // Non-blocking variant; nullopt when nothing is queued (or closed).
    virtual std::optional<Bytes> try_read_packet() = 0;
    virtual void write_packet(ByteView packet) = 0;
    // Makes one shutdown dummy packet show up on this endpoint's read side.
    virtual void inject_dummy() = 0;
    virtual void close() = 0;
    virtual bool is_closed() const = 0;
};

// Reserved identity of the shutdown dummy: UDP to 127.0.0.1:0 carrying a
// 4-byte magic.
inline constexpr std::uint8_t kDummyMagic[4] = {0xF1, 0x0D, 0xD0, 0x0D};
Bytes make_shutdown_dummy();
bool is_shutdown_dummy(ByteView packet);

// One direction of an in-process tunnel.
class PacketChannel {
public:
    void push(Bytes packet);
    std::optional<Bytes> pop_blocking();
    std::optional<Bytes> try_pop();
    void close();
    bool closed() const;

    // Times the reader resumed from pop_blocking(): every return, plus any
    // wake that found nothing to take.
    std::uint64_t wakeups() const { return wakeups_.load(); }
    std::uint64_t pushed() const { return pushed_.load(); }

private:
    mutable std::mutex mu_;
    std::condition_variable cv_;
    std::deque<Bytes> items_;
    bool closed_ = false;
    std::atomic<std::uint64_t> wakeups_{0};
    std::atomic<std::uint64_t> pushed_{0};
};

class InMemoryEndpoint final : public TunnelEndpoint {
public:
    InMemoryEndpoint(std::shared_ptr<PacketChannel> in, std::shared_ptr<PacketChannel> out)
        : in_(std::move(in)), out_(std::move(out)) {}

    std::optional<Bytes> read_packet() override { return in_->pop_blocking(); }
    std::optional<Bytes> try_read_packet() override { return in_->try_pop(); }
    void write_packet(ByteView packet) override;
    void inject_dummy() override { in_->push(make_shutdown_dummy()); }
    void close() override;
    bool is_closed() const override { return in_->closed(); }

    const PacketChannel& inbound() const { return *in_; }

private:
    std::shared_ptr<PacketChannel> in_;
    std::shared_ptr<PacketChannel> out_;
};

// A duplex point-to-point link: `relay` is what the relay reads and writes,
// `app` plays the apps' side of the device.
struct InMemoryTunnel {
    std::shared_ptr<InMemoryEndpoint> relay;
    std::shared_ptr<InMemoryEndpoint> app;

    static InMemoryTunnel create();
};

struct TunConfig {
    std::string ifname = "fl0";
    Ipv4Addr address{10, 111, 0, 1};
    std::uint8_t prefix_len = 24;
    // Any address inside the subnet other than `address`; the dummy is sent
    // there so the kernel routes it into the device.
    Ipv4Addr dummy_peer{10, 111, 0, 254};
    int mtu = 1500;
};

class TunOpenError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Platform TUN device (IFF_TUN | IFF_NO_PI). Needs CAP_NET_ADMIN.
class OsTunDevice final : public TunnelEndpoint {
public:
    explicit OsTunDevice(const TunConfig& config);
    ~OsTunDevice() override;

    std::optional<Bytes> read_packet() override;
    std::optional<Bytes> try_read_packet() override;
    void write_packet(ByteView packet) override;
    void inject_dummy() override;
    void close() override;
    bool is_closed() const override { return closed_.load(); }

    const std::string& name() const { return name_; }
    int fd() const { return fd_.get(); }

private:
    TunConfig config_;
    std::string name_;
    UniqueFd fd_;
    std::atomic<bool> closed_{false};
};

// Spin-then-park policy of the tunnel writer: +1 on an empty check, halved
// on a nonempty one, park at the threshold, back to 0 after a wakeup.
struct SleepCounter {
    std::uint32_t value = 0;
    std::uint32_t threshold = 256;

    void on_empty() { ++value; }
    void on_nonempty() { value /= 2; }
    bool should_park() const { return value >= threshold; }
    void on_wake() { value = 0; }
};

enum class WriteScheme { QueueWriteCounter, QueueWritePlain };

const char* to_string(WriteScheme s);

struct QueuedPacket {
    Bytes packet;
    std::int64_t enqueued_ns = 0;
};

namespace detail {

// Vyukov-style intrusive MPSC queue: wait-free push, single consumer pop.
template <typename T>
class MpscQueue {
public:
    MpscQueue() : head_(new Node), tail_(head_.load()) {}
    ~MpscQueue() {
        while (try_pop()) {
        }
        delete tail_;
    }
    MpscQueue(const MpscQueue&) = delete;
    MpscQueue& operator=(const MpscQueue&) = delete;

    void push(T value) {
        Node* n = new Node;
        n->value = std::move(value);
        Node* prev = head_.exchange(n, std::memory_order_acq_rel);
        prev->next.store(n, std::memory_order_release);
    }

    std::optional<T> try_pop() {
        Node* tail = tail_;
        Node* next = tail->next.load(std::memory_order_acquire);
        if (next == nullptr) return std::nullopt;
        std::optional<T> out(std::move(*next->value));
        next->value.reset();
        tail_ = next;
        delete tail;
        return out;
    }

    // Consumer-side emptiness check. A push that has swapped head_ but not
    // yet linked its node reads as nonempty here, so callers never park on
    // an item that is about to appear.
    bool empty() const {
        return tail_->next.load(std::memory_order_acquire) == nullptr && head_.load(std::memory_order_acquire) == tail_;
    }

private:
    struct Node {
        std::atomic<Node*> next{nullptr};
        std::optional<T> value;
    };
    std::atomic<Node*> head_;
    Node* tail_;
};

} // namespace detail

struct WriteQueueStats {
    std::uint64_t enqueued = 0;
    std::uint64_t dequeued = 0;
    std::uint64_t parks = 0;
    std::uint64_t unparks = 0;  // wakeups delivered by producers to a parked writer
    std::uint64_t notifies = 0; // condition signals issued by producers
};

// Multi-producer, single-consumer queue of tunnel-bound packets.
class WriteQueue {
public:
    explicit WriteQueue(WriteScheme scheme = WriteScheme::QueueWriteCounter, std::uint32_t spin_threshold = 256);
    ~WriteQueue();
    WriteQueue(const WriteQueue&) = delete;
    WriteQueue& operator=(const WriteQueue&) = delete;

    // Returns the time spent inside the call, in nanoseconds.
    std::int64_t enqueue(Bytes packet);

    // Writer side. Blocks per the scheme; nullopt once closed and drained.
    std::optional<QueuedPacket> dequeue();

    void close();
    bool closed() const { return closed_.load(); }

    WriteScheme scheme() const { return scheme_; }
    std::uint32_t spin_threshold() const { return counter_.threshold; }
    // Writer's counter as last published by the writer.
    std::uint32_t sleep_counter() const { return counter_mirror_.load(); }
    bool writer_parked() const { return parked_.load(); }
    WriteQueueStats stats() const;

private:
    std::optional<QueuedPacket> dequeue_counter();
    std::optional<QueuedPacket> dequeue_plain();
    void park();

    const WriteScheme scheme_;
    SleepCounter counter_;
    std::atomic<std::uint32_t> counter_mirror_{0};

    detail::MpscQueue<QueuedPacket> lockfree_;
    std::deque<QueuedPacket> locked_;

    std::mutex mu_;
    std::condition_variable cv_;
    std::atomic<bool> parked_{false};
    std::atomic<bool> closed_{false};

    std::atomic<std::uint64_t> enqueued_{0};
    std::atomic<std::uint64_t> dequeued_{0};
    std::atomic<std::uint64_t> parks_{0};
    std::atomic<std::uint64_t> unparks_{0};
    std::atomic<std::uint64_t> notifies_{0};
};

// Inbound packets for the main worker plus an eventfd it can poll on. Each
// push writes the eventfd exactly once.
class ReadQueue {
public:
    ReadQueue();
    void push(Bytes packet);
    std::vector<Bytes> drain();
    // Clears the eventfd counter; returns the number of pending signals.
    std::uint64_t consume_signal();
    int event_fd() const { return efd_.get(); }

    std::uint64_t pushes() const { return pushes_.load(); }
    std::uint64_t signals() const { return signals_.load(); }

private:
    UniqueFd efd_;
    std::mutex mu_;
    std::deque<Bytes> items_;
    std::atomic<std::uint64_t> pushes_{0};
    std::atomic<std::uint64_t> signals_{0};
};

enum class ShutdownResult { Stopped, AlreadyStopped };

// Owns the tunnel reader and writer workers.
class TunnelIo {
public:
    TunnelIo(std::shared_ptr<TunnelEndpoint> endpoint, ReadQueue& reads, WriteQueue& writes);
    ~TunnelIo();

    void start();
    // Stops the reader via the dummy packet; the dummy itself is forwarded
    // to the read queue so the main worker learns about the shutdown.
    ShutdownResult stop_reader();
    // Closes the write queue after the remaining packets are written.
    void stop_writer();

    std::uint64_t packets_read() const { return packets_read_.load(); }
    std::uint64_t packets_written() const { return packets_written_.load(); }
    bool dummy_seen() const { return dummy_seen_.load(); }

private:
    void reader_loop();
    void writer_loop();

    std::shared_ptr<TunnelEndpoint> endpoint_;
    ReadQueue& reads_;
    WriteQueue& writes_;
    std::thread reader_;
    std::thread writer_;
    std::atomic<bool> stop_requested_{false};
    std::atomic<bool> dummy_seen_{false};
    std::atomic<std::uint64_t> packets_read_{0};
    std::atomic<std::uint64_t> packets_written_{0};
    std::mutex stop_mu_;
    bool reader_stopped_ = false;
};

} // namespace flowlens
