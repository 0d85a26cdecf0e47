#ifndef S4M_ERROR_HPP
#define S4M_ERROR_HPP

#include <stdexcept>
#include <string>

namespace s4m {

// Argument or shape contract violated by the caller.
class invalid_argument : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// A linear system or Woodbury denominator became (numerically) singular.
class numeric_singularity : public std::runtime_error {
public:
    numeric_singularity(const std::string& what, double step, long node = -1)
        : std::runtime_error(what), step_(step), node_(node) {}

    double step() const noexcept { return step_; }
    long node() const noexcept { return node_; }

private:
    double step_;
    long node_;
};

// Malformed file contents (WAV, checkpoint, config, manifest).
class format_error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class io_error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Training produced a non-finite loss or gradient.
class training_diverged : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class unsupported : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

} // namespace s4m

#endif
