#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace limo {

// One exception type per failure class so callers can catch them separately.

struct dimension_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct domain_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Violated API precondition (non-scalar backward, non-unit rows, empty query set, ...).
struct contract_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Invalid numeric input to a kernel, e.g. log of a negative value.
struct numeric_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct config_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct episode_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct label_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct degenerate_embedding_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Malformed embedding container or checkpoint; carries the offending byte offset.
struct format_error : std::runtime_error {
  format_error(const std::string& msg, std::size_t offset)
      : std::runtime_error(msg + " (at byte " + std::to_string(offset) + ")"),
        byte_offset(offset) {}

  std::size_t byte_offset;
};

}  // namespace limo
