// SPDX-License-Identifier: Apache-2.0
//
// Wires a tunnel endpoint, the reader/writer workers and the main event
// worker into one start/stop unit.

#pragma once

#include <exception>
#include <memory>
#include <mutex>
#include <thread>

#include "flowlens/relay_engine.hpp"
#include "flowlens/tunnel.hpp"

namespace flowlens {

struct RelayOptions {
    EngineConfig engine;
    WriteScheme write_scheme = WriteScheme::QueueWriteCounter;
    std::uint32_t spin_threshold = 256;
};

class Relay {
public:
    Relay(RelayOptions options, std::shared_ptr<TunnelEndpoint> endpoint, EngineDeps deps);
    ~Relay();
    Relay(const Relay&) = delete;
    Relay& operator=(const Relay&) = delete;

    void start();
    // Reader first (its dummy also ends the main loop), then the main
    // worker, then the writer once everything queued has been written.
    ShutdownResult stop();

    // Set if the main worker died with an exception.
    std::exception_ptr failure() const;

    RelayEngine& engine() { return engine_; }
    const RelayEngine& engine() const { return engine_; }
    TunnelIo& io() { return io_; }
    ReadQueue& read_queue() { return reads_; }
    WriteQueue& write_queue() { return writes_; }

private:
    std::shared_ptr<TunnelEndpoint> endpoint_;
    ReadQueue reads_;
    WriteQueue writes_;
    RelayEngine engine_;
    TunnelIo io_;
    std::thread main_;
    mutable std::mutex mu_;
    std::exception_ptr failure_;
    bool started_ = false;
    bool stopped_ = false;
};

} // namespace flowlens
