#include "mednvc/tensor.hpp"

namespace mednvc {

namespace {
bool g_finite_checks = true;
}

bool finite_checks_enabled() { return g_finite_checks; }

void set_finite_checks(bool on) { g_finite_checks = on; }

}  // namespace mednvc
