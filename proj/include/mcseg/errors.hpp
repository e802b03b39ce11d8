#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace mcseg {

/// Root of the library's exception hierarchy. Every error carries a category
/// that the CLI maps to a process exit code.
class Error : public std::runtime_error {
public:
    enum class Category { Usage, Data, Numerics };

    Error(Category category, const std::string& what)
        : std::runtime_error(what), category_(category) {}

    Category category() const noexcept { return category_; }

private:
    Category category_;
};

#define MCSEG_DEFINE_ERROR(Name, Cat)                                          \
    class Name : public Error {                                                \
    public:                                                                    \
        explicit Name(const std::string& what)                                 \
            : Error(Category::Cat, #Name ": " + what) {}                       \
    };

// Bad invocation, e.g. refusing to overwrite outputs (exit code 2).
MCSEG_DEFINE_ERROR(UsageError, Usage)

// Data and format problems (exit code 3).
MCSEG_DEFINE_ERROR(IoError, Data)
MCSEG_DEFINE_ERROR(FormatError, Data)
MCSEG_DEFINE_ERROR(TruncationError, Data)
MCSEG_DEFINE_ERROR(ArgumentError, Data)
MCSEG_DEFINE_ERROR(ConfigError, Data)
MCSEG_DEFINE_ERROR(StrategyError, Data)
MCSEG_DEFINE_ERROR(StateError, Data)

// Numerical failures (exit code 4).
MCSEG_DEFINE_ERROR(DegenerateError, Numerics)
MCSEG_DEFINE_ERROR(DegenerateRangeError, Numerics)
MCSEG_DEFINE_ERROR(UndefinedMetricsError, Numerics)

#undef MCSEG_DEFINE_ERROR

/// Power iteration ran out of iterations; `residual` is the last iterate step.
class ConvergenceError : public Error {
public:
    ConvergenceError(const std::string& what, double residual)
        : Error(Category::Numerics, "ConvergenceError: " + what), residual_(residual) {}

    double residual() const noexcept { return residual_; }

private:
    double residual_;
};

/// A non-finite gradient or loss appeared during training.
class NumericsError : public Error {
public:
    NumericsError(const std::string& what, std::size_t iteration)
        : Error(Category::Numerics,
                "NumericsError at iteration " + std::to_string(iteration) + ": " + what),
          iteration_(iteration) {}

    std::size_t iteration() const noexcept { return iteration_; }

private:
    std::size_t iteration_;
};

}  // namespace mcseg
