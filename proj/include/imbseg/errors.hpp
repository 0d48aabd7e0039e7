#pragma once

#include <stdexcept>
#include <string>

namespace imbseg {

// Base class for everything this library throws on purpose.
struct error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Invalid configuration or argument values.
struct config_error : error {
  using error::error;
};

// Malformed or unsupported file content.
struct io_error : error {
  using error::error;
};

// A referenced file (checkpoint, dataset, record) does not exist.
struct missing_artifact : error {
  using error::error;
};

// Numerical failure: non-finite values, impossible generation targets.
struct numeric_error : error {
  using error::error;
};

}  // namespace imbseg
