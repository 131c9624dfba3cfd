#include "tvl/rng.hpp"

#include <sstream>
#include <stdexcept>

namespace tvl {

std::string rng_state(const Rng& rng) {
  std::ostringstream os;
  os << rng;
  return os.str();
}

void set_rng_state(Rng& rng, const std::string& state) {
  std::istringstream is(state);
  is >> rng;
  if (is.fail()) throw std::invalid_argument("malformed rng state");
}

}  // namespace tvl
