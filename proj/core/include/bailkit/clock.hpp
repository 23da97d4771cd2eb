#pragma once

#include <chrono>
#include <mutex>

namespace bailkit {

/// Time source used for rate limiting and retry backoff.
class Clock {
public:
    using duration = std::chrono::steady_clock::duration;
    using time_point = std::chrono::steady_clock::time_point;

    virtual ~Clock() = default;
    virtual time_point now() = 0;
    virtual void sleep_until(time_point t) = 0;

    void sleep_for(duration d) { sleep_until(now() + d); }
};

Clock& system_clock();

/// Clock that only moves when slept on. Sleeping jumps straight to the
/// requested time.
class ManualClock : public Clock {
public:
    time_point now() override {
        std::lock_guard lock(mutex_);
        return now_;
    }

    void sleep_until(time_point t) override {
        std::lock_guard lock(mutex_);
        if (t > now_) now_ = t;
    }

    void advance(duration d) {
        std::lock_guard lock(mutex_);
        now_ += d;
    }

private:
    std::mutex mutex_;
    time_point now_{};
};

} // namespace bailkit
