// SPDX-License-Identifier: Apache-2.0
//
// Shared fixtures: a relay on an in-memory tunnel with a simulated app host.

#pragma once

#include <chrono>
#include <memory>
#include <random>
#include <string>

#include "flowlens/loopback.hpp"
#include "flowlens/relay.hpp"
#include "flowlens/sim.hpp"
#include "flowlens/store.hpp"

namespace flowlens::testing {

inline Bytes random_bytes(std::size_t n, std::uint32_t seed) {
    std::mt19937 rng(seed);
    Bytes out(n);
    for (auto& b : out) b = static_cast<std::uint8_t>(rng());
    return out;
}

struct HarnessOptions {
    EngineConfig engine;
    SocketApi* sockets = nullptr;
    MappingCoordinator* mapper = nullptr;
    WriteScheme scheme = WriteScheme::QueueWriteCounter;
};

// Relay + app host over one in-memory tunnel; records land in `sink`.
class RelayHarness {
public:
    explicit RelayHarness(HarnessOptions o = {}) : tunnel(InMemoryTunnel::create()) {
        EngineDeps deps;
        deps.sockets = o.sockets;
        deps.mapper = o.mapper;
        deps.sink = &sink;
        deps.context = [] {
            RecordContext c;
            c.network_type = NetworkType::Wired;
            c.network_label = "lo";
            c.session_id = "test";
            return c;
        };
        if (!o.engine.iss_seed) o.engine.iss_seed = 7;
        RelayOptions ro;
        ro.engine = o.engine;
        ro.write_scheme = o.scheme;
        relay = std::make_unique<Relay>(ro, tunnel.relay, deps);
        relay->start();
        host = std::make_unique<SimHost>(tunnel.app);
    }

    ~RelayHarness() { shutdown(); }

    void shutdown() {
        if (relay) relay->stop();
        if (host) host->stop();
    }

    // Waits for the flow table to drain; true if it did.
    bool wait_flows_empty(std::chrono::milliseconds timeout = std::chrono::seconds(5)) const {
        const auto deadline = std::chrono::steady_clock::now() + timeout;
        while (std::chrono::steady_clock::now() < deadline) {
            if (relay->engine().flow_count() == 0 && relay->engine().lingering_count() == 0) return true;
            std::this_thread::sleep_for(std::chrono::milliseconds(2));
        }
        return false;
    }

    InMemoryTunnel tunnel;
    CollectingSink sink;
    std::unique_ptr<Relay> relay;
    std::unique_ptr<SimHost> host;
};

// Sends `payload` through the relay to an echo server and returns what came
// back; closes cleanly.
struct EchoOutcome {
    bool connected = false;
    Bytes echoed;
    bool closed = false;
};

inline EchoOutcome echo_through(SimHost& host, const Endpoint& server, const Bytes& payload,
                                std::chrono::milliseconds timeout = std::chrono::seconds(20)) {
    EchoOutcome out;
    auto c = host.connect(server);
    if (!c) return out;
    out.connected = true;
    if (!payload.empty()) c->send(payload, timeout);
    c->shutdown_write();
    c->wait_peer_fin(timeout);
    out.echoed = c->received();
    out.closed = c->wait_closed(timeout);
    return out;
}

} // namespace flowlens::testing
