// SPDX-License-Identifier: Apache-2.0

#include "flowlens/relay_engine.hpp"

#include <sys/epoll.h>
#include <sys/eventfd.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <condition_variable>
#include <deque>
#include <map>
#include <mutex>
#include <random>
#include <thread>
#include <unordered_map>
#include <variant>
#include <vector>

#include "flowlens/instrument.hpp"
#include "flowlens/tcp_machine.hpp"

namespace flowlens {

namespace {

constexpr std::uint64_t kTagReads = 1;
constexpr std::uint64_t kTagInbox = 2;
constexpr std::uint64_t kFirstFlowId = 16;
constexpr std::size_t kRecvChunk = 64 * 1024;
constexpr int kMaxEvents = 64;

enum class TicketState { Pending, HandshakeDone, Registered, Abandoned };

// Shared by the main worker and one temporary worker.
struct Ticket {
    std::mutex mu;
    std::condition_variable cv;
    TicketState state = TicketState::Pending;
    int fd = -1; // socket the worker may be blocked on
};

struct ConnectDone {
    std::uint64_t flow_id = 0;
    bool success = false;
    int fd = -1; // ownership moves to the main worker
};
struct WorkerExit {
    std::uint64_t worker_id = 0;
};
struct StopRequest {};
using Message = std::variant<ConnectDone, WorkerExit, StopRequest>;

struct TcpFlow {
    TcpFlow(std::uint64_t id_, TcpRelay m) : id(id_), machine(std::move(m)) {}

    std::uint64_t id;
    TcpRelay machine;
    std::shared_ptr<Ticket> ticket;
    UniqueFd fd;
    bool ext_eof = false;
    bool half_close_pending = false;
    bool half_closed = false;
    bool handshake_signalled = false;
    bool drop = false;
};

struct UdpAssoc {
    FlowKey key;
    UniqueFd fd;
    std::int64_t last_activity_ns = 0;
};

struct WorkerTask {
    std::shared_ptr<Ticket> ticket;
    std::function<void(Ticket&)> body;
};

void close_abortively(UniqueFd& fd) {
    if (!fd) return;
    linger lg{1, 0};
    ::setsockopt(fd.get(), SOL_SOCKET, SO_LINGER, &lg, sizeof lg);
    fd.reset();
}

} // namespace

struct RelayEngine::Impl {
    Impl(EngineConfig c, ReadQueue& r, WriteQueue& w, EngineDeps d)
        : config(std::move(c)),
          reads(r),
          writes(w),
          sockets(d.sockets ? *d.sockets : posix_sockets()),
          clock(d.clock ? *d.clock : steady_clock()),
          mapper(d.mapper),
          sink(d.sink),
          context(std::move(d.context)) {
        if (config.iss_seed) {
            rng.seed(*config.iss_seed);
        } else {
            rng.seed(std::random_device{}());
        }
        epfd.reset(::epoll_create1(EPOLL_CLOEXEC));
        if (!epfd) throw errno_error("epoll_create1");
        inbox_fd.reset(::eventfd(0, EFD_NONBLOCK | EFD_CLOEXEC));
        if (!inbox_fd) throw errno_error("eventfd");
        recv_buf.resize(kRecvChunk);
    }

    EngineConfig config;
    ReadQueue& reads;
    WriteQueue& writes;
    SocketApi& sockets;
    const Clock& clock;
    MappingCoordinator* mapper;
    RecordSink* sink;
    std::function<RecordContext()> context;

    UniqueFd epfd;
    UniqueFd inbox_fd;
    std::mutex inbox_mu;
    std::vector<Message> inbox;

    std::map<FlowKey, std::uint64_t> by_key;
    std::unordered_map<std::uint64_t, TcpFlow> tcp;
    std::unordered_map<std::uint64_t, UdpAssoc> udp;
    std::unordered_map<std::uint64_t, TcpFlow> lingering;
    std::uint64_t next_id = kFirstFlowId;
    std::mt19937 rng;
    Bytes recv_buf;

    struct Worker {
        std::thread thread;
        std::shared_ptr<Ticket> ticket;
    };
    std::unordered_map<std::uint64_t, Worker> workers;
    std::uint64_t next_worker = 1;
    std::deque<WorkerTask> backlog;

    mutable std::mutex stats_mu;
    EngineStats st;
    std::atomic<std::size_t> n_tcp{0};
    std::atomic<std::size_t> n_udp{0};
    std::atomic<std::size_t> n_linger{0};
    std::atomic<std::size_t> n_workers{0};
    std::atomic<bool> is_running{false};
    bool stopping = false;

    std::function<void(const CycleInfo&)> observer;
    std::function<void()> before_wait;

    void bump(std::uint64_t EngineStats::*field, std::uint64_t by = 1) {
        std::lock_guard lk(stats_mu);
        st.*field += by;
    }

    void publish_sizes() {
        n_tcp = tcp.size();
        n_udp = udp.size();
        n_linger = lingering.size();
        n_workers = workers.size();
    }

    // ---- messaging ----

    void post(Message m) {
        {
            std::lock_guard lk(inbox_mu);
            inbox.push_back(std::move(m));
        }
        const std::uint64_t one = 1;
        [[maybe_unused]] auto rc = ::write(inbox_fd.get(), &one, sizeof one);
    }

    std::vector<Message> take_inbox() {
        std::uint64_t v = 0;
        [[maybe_unused]] auto rc = ::read(inbox_fd.get(), &v, sizeof v);
        std::lock_guard lk(inbox_mu);
        return std::exchange(inbox, {});
    }

    void epoll_add(int fd, std::uint32_t events, std::uint64_t tag) {
        epoll_event ev{};
        ev.events = events;
        ev.data.u64 = tag;
        if (::epoll_ctl(epfd.get(), EPOLL_CTL_ADD, fd, &ev) != 0) throw errno_error("epoll_ctl");
    }

    // ---- tunnel output ----

    void enqueue(Bytes pkt) {
        try {
            writes.enqueue(std::move(pkt));
        } catch (const QueueClosed&) {
        }
    }

    void emit(const FlowKey& key, const TcpSegment& seg) {
        enqueue(serialize_ipv4(make_tcp_packet(key.dst_addr, key.src_addr, seg)));
    }

    void relay_udp_back(const FlowKey& key, ByteView payload) {
        UdpDatagram d;
        d.src_port = key.dst_port;
        d.dst_port = key.src_port;
        d.payload.assign(payload.begin(), payload.end());
        enqueue(serialize_ipv4(make_udp_packet(key.dst_addr, key.src_addr, d)));
    }

    // ---- workers ----

    void submit_task(WorkerTask task) {
        if (workers.size() < config.max_connect_workers) {
            spawn(std::move(task));
        } else {
            backlog.push_back(std::move(task));
        }
    }

    void spawn(WorkerTask task) {
        const std::uint64_t wid = next_worker++;
        auto ticket = task.ticket;
        std::thread th([this, wid, task = std::move(task)] {
            task.body(*task.ticket);
            post(WorkerExit{wid});
        });
        workers.emplace(wid, Worker{std::move(th), std::move(ticket)});
        bump(&EngineStats::workers_spawned);
        {
            std::lock_guard lk(stats_mu);
            st.workers_peak = std::max<std::uint64_t>(st.workers_peak, workers.size());
        }
        n_workers = workers.size();
    }

    void pump_backlog() {
        while (!stopping && workers.size() < config.max_connect_workers && !backlog.empty()) {
            WorkerTask task = std::move(backlog.front());
            backlog.pop_front();
            {
                std::lock_guard lk(task.ticket->mu);
                if (task.ticket->state == TicketState::Abandoned) continue;
            }
            spawn(std::move(task));
        }
    }

    static void abandon(const std::shared_ptr<Ticket>& t, bool abort_io) {
        if (!t) return;
        std::lock_guard lk(t->mu);
        if (t->state == TicketState::Registered) return;
        t->state = TicketState::Abandoned;
        if (abort_io && t->fd >= 0) ::shutdown(t->fd, SHUT_RDWR);
        t->cv.notify_all();
    }

    AppIdentity map_app(const FlowKey& key, std::int64_t done_ns) {
        if (!mapper) return AppIdentity::unknown(-1);
        try {
            return mapper->map_flow(key, done_ns);
        } catch (const std::exception&) {
            return AppIdentity::unknown(-1);
        }
    }

    void emit_record(MeasureKind kind, const AppIdentity& app, const FlowKey& key, const Timing& timing,
                     std::string domain) {
        if (!sink) return;
        const RecordContext ctx = context ? context() : RecordContext{};
        sink->submit(make_record(kind, app, key, timing, ctx, std::move(domain)));
        bump(&EngineStats::records_emitted);
    }

    void connect_worker(Ticket& t, std::uint64_t flow_id, FlowKey key) {
        set_worker_role(WorkerRole::ConnectWorker);
        {
            std::lock_guard lk(t.mu);
            if (t.state == TicketState::Abandoned) return;
        }
        ConnectResult cr = timed_connect(sockets, clock, key.destination(), config.connect_timeout, config.mark,
                                         [&t](int fd) {
                                             std::lock_guard lk(t.mu);
                                             t.fd = fd;
                                         });
        const std::int64_t done_ns = clock.now_ns();
        const bool ok = cr.timing.outcome == Outcome::Success;
        bool abandoned = false;
        {
            std::lock_guard lk(t.mu);
            t.fd = -1;
            abandoned = t.state == TicketState::Abandoned;
        }
        int handoff = -1;
        if (ok && !abandoned) {
            set_nonblocking(cr.fd.get(), true);
            handoff = cr.fd.release();
        }
        cr.fd.reset();
        if (abandoned) return;
        post(ConnectDone{flow_id, ok, handoff});

        emit_record(MeasureKind::TcpConnect, map_app(key, done_ns), key, cr.timing, {});
        if (!ok) return;

        // Join the epoll set only once the app side has finished its handshake.
        std::unique_lock lk(t.mu);
        t.cv.wait(lk, [&] { return t.state != TicketState::Pending; });
        if (t.state == TicketState::HandshakeDone) {
            epoll_event ev{};
            ev.events = EPOLLIN | EPOLLOUT | EPOLLRDHUP | EPOLLET;
            ev.data.u64 = flow_id;
            ::epoll_ctl(epfd.get(), EPOLL_CTL_ADD, handoff, &ev);
            t.state = TicketState::Registered;
        }
    }

    void dns_worker(Ticket& t, FlowKey key, Bytes query) {
        set_worker_role(WorkerRole::DnsWorker);
        {
            std::lock_guard lk(t.mu);
            if (t.state == TicketState::Abandoned) return;
        }
        std::string domain;
        try {
            domain = parse_dns_header(query).question_name;
        } catch (const CodecException&) {
        }
        auto relay = [this, &key](ByteView reply) { relay_udp_back(key, reply); };
        DnsResult res = timed_dns(sockets, clock, query, key.destination(), config.dns_timeout, relay, [&](int fd) {
            apply_socket_mark(sockets, fd, config.mark);
            std::lock_guard lk(t.mu);
            t.fd = fd;
            if (t.state == TicketState::Abandoned) ::shutdown(fd, SHUT_RDWR);
        });
        const std::int64_t done_ns = clock.now_ns();
        bool abandoned = false;
        {
            std::lock_guard lk(t.mu);
            t.fd = -1;
            abandoned = t.state == TicketState::Abandoned;
        }
        res.fd.reset();
        if (abandoned) return;
        if (res.timing.outcome == Outcome::Success) relay(res.reply);
        emit_record(MeasureKind::Dns, map_app(key, done_ns), key, res.timing, std::move(domain));
    }

    // ---- TCP ----

    void signal_handshake(TcpFlow& f) {
        if (f.handshake_signalled || !f.machine.handshake_complete() || !f.ticket) return;
        f.handshake_signalled = true;
        std::lock_guard lk(f.ticket->mu);
        if (f.ticket->state == TicketState::Pending) {
            f.ticket->state = TicketState::HandshakeDone;
            f.ticket->cv.notify_all();
        }
    }

    void ensure_registered(TcpFlow& f) {
        if (!f.fd) return;
        bool add = true;
        if (f.ticket) {
            std::lock_guard lk(f.ticket->mu);
            if (f.ticket->state == TicketState::Registered) {
                add = false;
            } else {
                f.ticket->state = TicketState::Registered;
                f.ticket->cv.notify_all();
            }
        }
        if (add) epoll_add(f.fd.get(), EPOLLIN | EPOLLOUT | EPOLLRDHUP | EPOLLET, f.id);
    }

    void abort_socket(TcpFlow& f) {
        abandon(f.ticket, true);
        close_abortively(f.fd);
    }

    void execute(TcpFlow& f, const RelayActions& actions) {
        bool want_write = false;
        for (const auto& a : actions) {
            if (const auto* e = std::get_if<EmitToTunnel>(&a)) {
                emit(f.machine.flow(), e->segment);
            } else if (std::holds_alternative<OpenExternal>(a)) {
                start_connect(f);
            } else if (std::holds_alternative<WriteExternal>(a)) {
                want_write = true;
            } else if (std::holds_alternative<HalfCloseExternal>(a)) {
                f.half_close_pending = true;
            } else if (std::holds_alternative<CloseExternal>(a)) {
                abort_socket(f);
            } else if (std::holds_alternative<DropFlow>(a)) {
                f.drop = true;
            }
        }
        if (want_write && !f.drop) flush(f);
        maybe_half_close(f);
    }

    void flush(TcpFlow& f) {
        if (!f.fd) {
            if (f.machine.pending_to_socket().size() > config.pre_connect_buffer_limit) {
                bump(&EngineStats::pre_connect_overflows);
                execute(f, f.machine.on_socket_closed(true));
            }
            return;
        }
        while (!f.drop && !f.machine.pending_to_socket().empty()) {
            const Bytes& p = f.machine.pending_to_socket();
            const ssize_t n = ::send(f.fd.get(), p.data(), p.size(), MSG_NOSIGNAL | MSG_DONTWAIT);
            if (n > 0) {
                execute(f, f.machine.on_socket_wrote(static_cast<std::size_t>(n)));
                continue;
            }
            if (n < 0 && errno == EINTR) continue;
            if (n < 0 && (errno == EAGAIN || errno == EWOULDBLOCK)) break;
            execute(f, f.machine.on_socket_closed(true));
            break;
        }
    }

    void maybe_half_close(TcpFlow& f) {
        if (!f.half_close_pending || f.half_closed || !f.fd || f.drop) return;
        if (!f.machine.pending_to_socket().empty()) return;
        ::shutdown(f.fd.get(), SHUT_WR);
        f.half_closed = true;
    }

    void read_socket(TcpFlow& f) {
        while (f.fd && !f.drop && !f.ext_eof) {
            const TcpState s = f.machine.state();
            if (s != TcpState::Established && s != TcpState::HalfClosedByApp) break;
            const ssize_t n = ::recv(f.fd.get(), recv_buf.data(), recv_buf.size(), MSG_DONTWAIT);
            if (n > 0) {
                execute(f, f.machine.on_socket_data(ByteView(recv_buf.data(), static_cast<std::size_t>(n))));
                continue;
            }
            if (n == 0) {
                f.ext_eof = true;
                execute(f, f.machine.on_socket_closed(false));
                break;
            }
            if (errno == EINTR) continue;
            if (errno == EAGAIN || errno == EWOULDBLOCK) break;
            f.ext_eof = true;
            execute(f, f.machine.on_socket_closed(true));
        }
    }

    void start_connect(TcpFlow& f) {
        auto ticket = std::make_shared<Ticket>();
        f.ticket = ticket;
        const std::uint64_t id = f.id;
        const FlowKey key = f.machine.flow();
        submit_task({ticket, [this, id, key](Ticket& t) { connect_worker(t, id, key); }});
    }

    void remove_tcp(std::unordered_map<std::uint64_t, TcpFlow>::iterator it, bool allow_linger) {
        TcpFlow f = std::move(it->second);
        tcp.erase(it);
        by_key.erase(f.machine.flow());
        bump(&EngineStats::tcp_flows_closed);
        if (allow_linger && f.fd && !f.machine.pending_to_socket().empty()) {
            ensure_registered(f);
            const std::uint64_t id = f.id;
            lingering.emplace(id, std::move(f));
        } else {
            abandon(f.ticket, true);
            f.fd.reset();
        }
        publish_sizes();
    }

    // Applies the flow-table consequences of the last event on flow `id`.
    void settle(std::uint64_t id) {
        auto it = tcp.find(id);
        if (it == tcp.end()) return;
        TcpFlow& f = it->second;
        signal_handshake(f);
        if (f.drop) {
            remove_tcp(it, false);
        } else if (f.machine.state() == TcpState::Closed) {
            remove_tcp(it, true);
        }
    }

    void handle_tcp(const IpPacket& ip) {
        TcpSegment seg;
        try {
            seg = parse_tcp(ip);
        } catch (const CodecException&) {
            bump(&EngineStats::malformed_dropped);
            return;
        }
        const FlowKey key{ipproto::kTcp, ip.src, seg.src_port, ip.dst, seg.dst_port};
        const auto found = by_key.find(key);
        if (found == by_key.end()) {
            if (seg.flags.rst) return;
            if (!seg.flags.syn || seg.flags.ack) {
                bump(&EngineStats::dead_flow_resets);
                emit(key, make_reset_for(key, seg));
                return;
            }
            if (tcp.size() + udp.size() >= config.flow_capacity) {
                bump(&EngineStats::capacity_refusals);
                emit(key, make_reset_for(key, seg));
                return;
            }
            const std::uint64_t id = next_id++;
            auto [it, inserted] = tcp.emplace(id, TcpFlow(id, TcpRelay(key, static_cast<std::uint32_t>(rng()))));
            by_key.emplace(key, id);
            bump(&EngineStats::tcp_flows_opened);
            publish_sizes();
            execute(it->second, it->second.machine.on_tunnel_segment(seg));
            settle(id);
            return;
        }
        const std::uint64_t id = found->second;
        auto it = tcp.find(id);
        if (it == tcp.end()) return;
        execute(it->second, it->second.machine.on_tunnel_segment(seg));
        settle(id);
    }

    void on_connect_done(const ConnectDone& m) {
        auto it = tcp.find(m.flow_id);
        if (it == tcp.end()) {
            if (m.fd >= 0) ::close(m.fd);
            return;
        }
        TcpFlow& f = it->second;
        if (m.fd >= 0) f.fd.reset(m.fd);
        try {
            execute(f, f.machine.external_connected(m.success));
        } catch (const TcpMachineError&) {
            f.drop = true;
        }
        settle(m.flow_id);
    }

    void on_tcp_socket_event(std::uint64_t id, std::uint32_t events) {
        auto it = tcp.find(id);
        TcpFlow& f = it->second;
        if (events & (EPOLLIN | EPOLLRDHUP | EPOLLHUP | EPOLLERR)) read_socket(f);
        if (!f.drop && (events & (EPOLLOUT | EPOLLERR | EPOLLHUP))) {
            flush(f);
            maybe_half_close(f);
        }
        settle(id);
    }

    void on_lingering_event(std::uint64_t id) {
        auto it = lingering.find(id);
        TcpFlow& f = it->second;
        bool done = false;
        while (!f.machine.pending_to_socket().empty()) {
            const Bytes& p = f.machine.pending_to_socket();
            const ssize_t n = ::send(f.fd.get(), p.data(), p.size(), MSG_NOSIGNAL | MSG_DONTWAIT);
            if (n > 0) {
                f.machine.on_socket_wrote(static_cast<std::size_t>(n));
                continue;
            }
            if (n < 0 && errno == EINTR) continue;
            if (n < 0 && (errno == EAGAIN || errno == EWOULDBLOCK)) break;
            done = true;
            break;
        }
        if (done || f.machine.pending_to_socket().empty()) {
            lingering.erase(it);
            publish_sizes();
        }
    }

    // ---- UDP ----

    void remove_udp(std::uint64_t id) {
        auto it = udp.find(id);
        if (it == udp.end()) return;
        by_key.erase(it->second.key);
        udp.erase(it);
        publish_sizes();
    }

    void handle_udp(const IpPacket& ip) {
        UdpDatagram d;
        try {
            d = parse_udp(ip);
        } catch (const CodecException&) {
            bump(&EngineStats::malformed_dropped);
            return;
        }
        const FlowKey key{ipproto::kUdp, ip.src, d.src_port, ip.dst, d.dst_port};
        if (d.dst_port == config.dns_port) {
            bump(&EngineStats::dns_queries);
            auto ticket = std::make_shared<Ticket>();
            submit_task({ticket, [this, key, q = std::move(d.payload)](Ticket& t) { dns_worker(t, key, q); }});
            return;
        }

        std::uint64_t id = 0;
        if (const auto found = by_key.find(key); found != by_key.end()) {
            id = found->second;
        } else {
            if (tcp.size() + udp.size() >= config.flow_capacity) {
                bump(&EngineStats::capacity_refusals);
                return;
            }
            UniqueFd fd(sockets.socket(AF_INET, SOCK_DGRAM | SOCK_NONBLOCK | SOCK_CLOEXEC, 0));
            if (!fd || apply_socket_mark(sockets, fd.get(), config.mark) != 0) {
                bump(&EngineStats::udp_send_failures);
                return;
            }
            id = next_id++;
            epoll_add(fd.get(), EPOLLIN, id);
            udp.emplace(id, UdpAssoc{key, std::move(fd), 0});
            by_key.emplace(key, id);
            bump(&EngineStats::udp_associations_opened);
            publish_sizes();
        }
        UdpAssoc& a = udp.at(id);
        a.last_activity_ns = clock.now_ns();
        const sockaddr_in to = to_sockaddr(key.destination());
        const ssize_t n = sockets.sendto(a.fd.get(), d.payload.data(), d.payload.size(), MSG_DONTWAIT,
                                         reinterpret_cast<const sockaddr*>(&to), sizeof to);
        if (n < 0 && errno != EAGAIN && errno != EWOULDBLOCK) {
            bump(&EngineStats::udp_send_failures);
            remove_udp(id);
        }
    }

    void on_udp_event(std::uint64_t id) {
        UdpAssoc& a = udp.at(id);
        while (true) {
            sockaddr_in from{};
            socklen_t len = sizeof from;
            const ssize_t n = sockets.recvfrom(a.fd.get(), recv_buf.data(), recv_buf.size(), MSG_DONTWAIT,
                                               reinterpret_cast<sockaddr*>(&from), &len);
            if (n < 0) {
                if (errno == EINTR || errno == ECONNREFUSED) continue;
                break;
            }
            if (from_sockaddr(from) != a.key.destination()) continue;
            a.last_activity_ns = clock.now_ns();
            relay_udp_back(a.key, ByteView(recv_buf.data(), static_cast<std::size_t>(n)));
        }
    }

    void expire_udp() {
        if (udp.empty()) return;
        const std::int64_t now = clock.now_ns();
        const std::int64_t idle = std::chrono::nanoseconds(config.udp_idle_timeout).count();
        std::vector<std::uint64_t> dead;
        for (const auto& [id, a] : udp) {
            if (now - a.last_activity_ns >= idle) dead.push_back(id);
        }
        for (auto id : dead) remove_udp(id);
        bump(&EngineStats::udp_associations_expired, dead.size());
    }

    int wait_timeout_ms() const {
        if (udp.empty()) return -1;
        const std::int64_t now = clock.now_ns();
        const std::int64_t idle = std::chrono::nanoseconds(config.udp_idle_timeout).count();
        std::int64_t soonest = idle;
        for (const auto& [id, a] : udp) soonest = std::min(soonest, a.last_activity_ns + idle - now);
        return static_cast<int>(std::max<std::int64_t>(0, soonest) / 1'000'000 + 1);
    }

    // ---- dispatch ----

    void handle_packet(const Bytes& raw) {
        bump(&EngineStats::tunnel_packets);
        if (is_shutdown_dummy(raw)) {
            bump(&EngineStats::dummy_packets);
            stopping = true;
            return;
        }
        IpPacket ip;
        try {
            ip = parse_ipv4(raw);
        } catch (const CodecException&) {
            bump(&EngineStats::malformed_dropped);
            return;
        }
        if (ip.is_fragment()) {
            bump(&EngineStats::fragments_dropped);
            return;
        }
        if (ip.protocol == ipproto::kTcp) {
            handle_tcp(ip);
        } else if (ip.protocol == ipproto::kUdp) {
            handle_udp(ip);
        } else {
            bump(&EngineStats::unsupported_dropped);
        }
    }

    void handle_message(const Message& m) {
        if (const auto* cd = std::get_if<ConnectDone>(&m)) {
            on_connect_done(*cd);
        } else if (const auto* we = std::get_if<WorkerExit>(&m)) {
            if (auto it = workers.find(we->worker_id); it != workers.end()) {
                it->second.thread.join();
                workers.erase(it);
                n_workers = workers.size();
            }
            pump_backlog();
        } else {
            stopping = true;
        }
    }

    void on_socket_event(std::uint64_t id, std::uint32_t events) {
        if (tcp.count(id)) {
            on_tcp_socket_event(id, events);
        } else if (lingering.count(id)) {
            on_lingering_event(id);
        } else if (udp.count(id)) {
            on_udp_event(id);
        }
    }

    void run() {
        set_worker_role(WorkerRole::Main);
        epoll_add(reads.event_fd(), EPOLLIN, kTagReads);
        epoll_add(inbox_fd.get(), EPOLLIN, kTagInbox);
        epoll_event evs[kMaxEvents];
        std::uint64_t cycle = 0;
        while (!stopping) {
            if (before_wait) before_wait();
            const int n = ::epoll_wait(epfd.get(), evs, kMaxEvents, wait_timeout_ms());
            if (n < 0) {
                if (errno == EINTR) continue;
                throw errno_error("epoll_wait");
            }
            CycleInfo ci;
            ci.cycle = ++cycle;
            bool reads_ready = false;
            bool inbox_ready = false;
            for (int i = 0; i < n; ++i) {
                const std::uint64_t tag = evs[i].data.u64;
                if (tag == kTagReads) {
                    reads_ready = true;
                } else if (tag == kTagInbox) {
                    inbox_ready = true;
                } else {
                    on_socket_event(tag, evs[i].events);
                    ++ci.socket_events;
                }
            }
            // Tunnel packets are drained on every wakeup, whichever source
            // fired it.
            if (reads_ready) reads.consume_signal();
            for (const auto& pkt : reads.drain()) {
                ++ci.tunnel_packets;
                if (!stopping) handle_packet(pkt);
            }
            if (inbox_ready) {
                for (const auto& m : take_inbox()) {
                    ++ci.messages;
                    handle_message(m);
                }
            }
            expire_udp();
            bump(&EngineStats::cycles);
            if (observer) observer(ci);
        }
        shutdown_all();
    }

    void shutdown_all() {
        for (auto& [id, f] : tcp) {
            if (f.machine.state() != TcpState::Closed) {
                for (const auto& a : f.machine.on_socket_closed(true)) {
                    if (const auto* e = std::get_if<EmitToTunnel>(&a)) emit(f.machine.flow(), e->segment);
                }
            }
            abort_socket(f);
        }
        tcp.clear();
        lingering.clear();
        udp.clear();
        by_key.clear();
        backlog.clear();
        for (auto& [wid, w] : workers) abandon(w.ticket, true);
        for (auto& [wid, w] : workers) w.thread.join();
        workers.clear();
        for (const auto& m : take_inbox()) {
            if (const auto* cd = std::get_if<ConnectDone>(&m); cd && cd->fd >= 0) ::close(cd->fd);
        }
        publish_sizes();
    }
};

RelayEngine::RelayEngine(EngineConfig config, ReadQueue& reads, WriteQueue& writes, EngineDeps deps)
    : impl_(std::make_unique<Impl>(std::move(config), reads, writes, std::move(deps))) {}

RelayEngine::~RelayEngine() = default;

void RelayEngine::run() {
    impl_->is_running = true;
    try {
        impl_->run();
    } catch (...) {
        impl_->shutdown_all();
        impl_->is_running = false;
        throw;
    }
    impl_->is_running = false;
}

void RelayEngine::request_stop() { impl_->post(StopRequest{}); }

std::size_t RelayEngine::flow_count() const { return impl_->n_tcp.load() + impl_->n_udp.load(); }
std::size_t RelayEngine::tcp_flow_count() const { return impl_->n_tcp.load(); }
std::size_t RelayEngine::udp_association_count() const { return impl_->n_udp.load(); }
std::size_t RelayEngine::lingering_count() const { return impl_->n_linger.load(); }
std::size_t RelayEngine::active_workers() const { return impl_->n_workers.load(); }
bool RelayEngine::running() const { return impl_->is_running.load(); }

EngineStats RelayEngine::stats() const {
    std::lock_guard lk(impl_->stats_mu);
    return impl_->st;
}

void RelayEngine::set_cycle_observer(std::function<void(const CycleInfo&)> fn) { impl_->observer = std::move(fn); }
void RelayEngine::set_before_wait(std::function<void()> fn) { impl_->before_wait = std::move(fn); }

} // namespace flowlens
