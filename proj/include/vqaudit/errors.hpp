#ifndef VQAUDIT_ERRORS_HPP
#define VQAUDIT_ERRORS_HPP

#include <stdexcept>
#include <string>

namespace vqa {

/// Invalid shapes, sizes or hyperparameters supplied by the caller.
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// An API was called out of order, e.g. a backward pass without its forward cache.
class UsageError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

/// A file or directory could not be read back consistently.
class LoadError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// A NaN or infinity showed up where finite values are required.
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Output could not be written.
class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

} // namespace vqa

#endif
