#pragma once

#include <sstream>
#include <stdexcept>
#include <string>

namespace hsalab {

// Error taxonomy. The CLI maps these onto exit codes: config/usage errors
// exit 2, everything else (contract, dimension, store) exits 1.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Shape / extent mismatch on a public operation.
struct DimensionError : Error {
  using Error::Error;
};

// Internal invariant broken: missing tape, inconsistent maps, NaN output.
struct ContractError : Error {
  using Error::Error;
};

// Bad user-supplied data (token id out of range, impossible task lengths).
struct InputError : Error {
  using Error::Error;
};

// Tiered-store integrity violation (fetch of a chunk that was never committed).
struct StoreError : Error {
  using Error::Error;
};

// Config file problems: unknown key, unparsable value, invariant violation.
struct ConfigError : Error {
  using Error::Error;
};

namespace detail {
inline std::string check_msg(const char* kind, const char* expr, const std::string& what) {
  std::ostringstream os;
  os << kind << ": " << what << " [" << expr << "]";
  return os.str();
}
}  // namespace detail

}  // namespace hsalab

#define HSALAB_CHECK(cond, what)                                                             \
  do {                                                                                       \
    if (!(cond)) throw ::hsalab::ContractError(::hsalab::detail::check_msg("contract", #cond, (what))); \
  } while (false)

#define HSALAB_CHECK_DIM(cond, what)                                                           \
  do {                                                                                         \
    if (!(cond)) throw ::hsalab::DimensionError(::hsalab::detail::check_msg("dimension", #cond, (what))); \
  } while (false)

#define HSALAB_CHECK_INPUT(cond, what)                                                      \
  do {                                                                                      \
    if (!(cond)) throw ::hsalab::InputError(::hsalab::detail::check_msg("input", #cond, (what))); \
  } while (false)
