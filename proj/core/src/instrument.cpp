// SPDX-License-Identifier: Apache-2.0

#include "flowlens/instrument.hpp"

#include <array>
#include <atomic>

namespace flowlens {

namespace {

constexpr std::size_t kRoles = static_cast<std::size_t>(WorkerRole::kCount);
constexpr std::size_t kOps = static_cast<std::size_t>(GuardedOp::kCount);

thread_local WorkerRole t_role = WorkerRole::Unassigned;

std::array<std::atomic<std::uint64_t>, kRoles * kOps>& counters() {
    static std::array<std::atomic<std::uint64_t>, kRoles * kOps> c{};
    return c;
}

std::size_t slot(GuardedOp op, WorkerRole role) {
    return static_cast<std::size_t>(op) * kRoles + static_cast<std::size_t>(role);
}

} // namespace

const char* to_string(WorkerRole role) {
    switch (role) {
    case WorkerRole::Unassigned: return "unassigned";
    case WorkerRole::Main: return "main";
    case WorkerRole::TunnelReader: return "tunnel-reader";
    case WorkerRole::TunnelWriter: return "tunnel-writer";
    case WorkerRole::ConnectWorker: return "connect";
    case WorkerRole::DnsWorker: return "dns";
    case WorkerRole::StoreWorker: return "store";
    case WorkerRole::Bench: return "bench";
    case WorkerRole::kCount: break;
    }
    return "?";
}

const char* to_string(GuardedOp op) {
    switch (op) {
    case GuardedOp::BlockingConnect: return "blocking-connect";
    case GuardedOp::DnsReceive: return "dns-receive";
    case GuardedOp::ProcParse: return "proc-parse";
    case GuardedOp::StoreWrite: return "store-write";
    case GuardedOp::kCount: break;
    }
    return "?";
}

void set_worker_role(WorkerRole role) { t_role = role; }

WorkerRole current_worker_role() { return t_role; }

void note_guarded_op(GuardedOp op) { counters()[slot(op, t_role)].fetch_add(1, std::memory_order_relaxed); }

std::uint64_t guarded_op_count(GuardedOp op, WorkerRole role) {
    return counters()[slot(op, role)].load(std::memory_order_relaxed);
}

void reset_guarded_op_counts() {
    for (auto& c : counters()) c.store(0, std::memory_order_relaxed);
}

} // namespace flowlens
