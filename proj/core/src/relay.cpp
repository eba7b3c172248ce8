// SPDX-License-Identifier: Apache-2.0

#include "flowlens/relay.hpp"

namespace flowlens {

Relay::Relay(RelayOptions options, std::shared_ptr<TunnelEndpoint> endpoint, EngineDeps deps)
    : endpoint_(std::move(endpoint)),
      writes_(options.write_scheme, options.spin_threshold),
      engine_(std::move(options.engine), reads_, writes_, std::move(deps)),
      io_(endpoint_, reads_, writes_) {}

Relay::~Relay() { stop(); }

void Relay::start() {
    std::lock_guard lk(mu_);
    if (started_) return;
    started_ = true;
    io_.start();
    main_ = std::thread([this] {
        try {
            engine_.run();
        } catch (...) {
            std::lock_guard lk2(mu_);
            failure_ = std::current_exception();
        }
    });
}

ShutdownResult Relay::stop() {
    {
        std::lock_guard lk(mu_);
        if (!started_ || stopped_) return ShutdownResult::AlreadyStopped;
        stopped_ = true;
    }
    io_.stop_reader();
    // Covers an endpoint that could not carry the dummy.
    engine_.request_stop();
    if (main_.joinable()) main_.join();
    io_.stop_writer();
    return ShutdownResult::Stopped;
}

std::exception_ptr Relay::failure() const {
    std::lock_guard lk(mu_);
    return failure_;
}

} // namespace flowlens
