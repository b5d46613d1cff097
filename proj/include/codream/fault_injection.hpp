#pragma once

namespace codream {

// Deliberate defects for mutation-checking the self-test. Never set outside
// `codream selftest --inject`.
enum class Fault { none, jsd_sign };

void inject_fault(Fault fault);
bool fault_active(Fault fault);

}  // namespace codream
