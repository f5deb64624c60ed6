#ifndef AFFECT_VERIFY_HPP
#define AFFECT_VERIFY_HPP

#include <string>
#include <vector>

namespace affect {

struct VerifyResult {
    std::string name;
    double max_rel_err = 0;
    bool pass = false;
};

// Numeric gradient verification of every layer, both loss terms, and the
// end-to-end model on a tiny configuration: central differences, eps 1e-5,
// pass threshold 1e-4, ten seeds per layer case.
std::vector<VerifyResult> run_gradient_suite();

bool all_pass(const std::vector<VerifyResult>& results);

} // namespace affect

#endif
