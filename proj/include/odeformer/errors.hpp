#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace odeformer {

// Non-finite value detected during numerics. `index` identifies the failing
// unit (RK stage, tensor element, ...) when the caller can name one.
class overflow_error : public std::runtime_error {
public:
    overflow_error(const std::string& what, std::ptrdiff_t index = -1)
        : std::runtime_error(what), index_(index) {}

    std::ptrdiff_t index() const noexcept { return index_; }

private:
    std::ptrdiff_t index_;
};

class shape_error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Global error at or below the f64 noise floor; order estimates are meaningless.
class precision_floor_error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class detached_graph_error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Block state missing or inconsistent for a history-consuming variant.
class state_error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class length_error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class empty_batch_error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class config_error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class io_error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

} // namespace odeformer
