#ifndef ICLSTREAMS_VARIANT_HPP
#define ICLSTREAMS_VARIANT_HPP

#include <string>

#include "iclstreams/errors.hpp"

namespace icls {

// Which residual attention stream is active. Classic is the unmodified
// network; the others add the first (or previous) layer's Q, K, or V matrix
// to the same matrix of the next layer. None of them add parameters.
enum class StreamVariant { Classic, Queries, Keys, Values };

inline const char* variant_name(StreamVariant v) {
  switch (v) {
    case StreamVariant::Classic: return "classic";
    case StreamVariant::Queries: return "queries";
    case StreamVariant::Keys: return "keys";
    case StreamVariant::Values: return "values";
  }
  return "?";
}

inline StreamVariant variant_from_name(const std::string& s) {
  if (s == "classic") return StreamVariant::Classic;
  if (s == "queries") return StreamVariant::Queries;
  if (s == "keys") return StreamVariant::Keys;
  if (s == "values") return StreamVariant::Values;
  throw ConfigError("unknown variant '" + s +
                    "' (valid: classic, queries, keys, values)");
}

}  // namespace icls

#endif  // ICLSTREAMS_VARIANT_HPP
