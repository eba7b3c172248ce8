// SPDX-License-Identifier: Apache-2.0
//
// Worker-role tagging. Every long-lived or temporary thread declares its role
// once; calls that must never run on the main event worker report themselves
// here so tests can check where they actually ran.

#pragma once

#include <cstdint>

namespace flowlens {

enum class WorkerRole : std::uint8_t {
    Unassigned,
    Main,
    TunnelReader,
    TunnelWriter,
    ConnectWorker,
    DnsWorker,
    StoreWorker,
    Bench,
    kCount,
};

enum class GuardedOp : std::uint8_t {
    BlockingConnect,
    DnsReceive,
    ProcParse,
    StoreWrite,
    kCount,
};

const char* to_string(WorkerRole role);
const char* to_string(GuardedOp op);

void set_worker_role(WorkerRole role);
WorkerRole current_worker_role();

// Counts one execution of `op` against the calling thread's role.
void note_guarded_op(GuardedOp op);

std::uint64_t guarded_op_count(GuardedOp op, WorkerRole role);
void reset_guarded_op_counts();

} // namespace flowlens
