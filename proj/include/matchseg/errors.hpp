#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace matchseg {

// Base class for every error raised by the library.
class error : public std::runtime_error {
public:
    explicit error(const std::string& msg) : std::runtime_error(msg) {}
};

// Operand shapes do not satisfy an operation's contract.
class shape_error : public error {
public:
    explicit shape_error(const std::string& msg) : error("shape error: " + msg) {}
};

// Values violate a precondition (zero-norm embedding, non-positive log input, ...).
class value_error : public error {
public:
    explicit value_error(const std::string& msg) : error("value error: " + msg) {}
};

// Invalid configuration (channel/ratio divisibility, spatial divisibility, bad keys, ...).
class config_error : public error {
public:
    explicit config_error(const std::string& msg) : error("config error: " + msg) {}
};

// On-disk format violations. Carries the failure kind and the byte offset at
// which the problem was detected.
class io_error : public error {
public:
    enum class kind { bad_magic, bad_version, truncated, dim_overflow, malformed, missing_file };

    io_error(kind k, std::size_t offset, const std::string& msg)
        : error("io error at byte " + std::to_string(offset) + ": " + msg),
          kind_(k),
          offset_(offset) {}

    kind error_kind() const { return kind_; }
    std::size_t byte_offset() const { return offset_; }

private:
    kind kind_;
    std::size_t offset_;
};

} // namespace matchseg
