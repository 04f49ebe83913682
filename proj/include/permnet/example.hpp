#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace permnet {

enum class Family { DirectPerm, IndirectPerm, IndirectDict, SwitchCorpus };

std::string family_name(Family f);
Family family_from_name(const std::string& name);

/// One benchmark instance: whitespace-free tokens, already framed with
/// <sos>/<sep>/<eos> on the source and <sos>/<eos> on the target.
struct Example {
    std::vector<std::string> source;
    std::vector<std::string> target;
    Family family = Family::DirectPerm;
    int data_length = 0;

    bool operator==(const Example& other) const {
        return source == other.source && target == other.target;
    }
};

/// `source<TAB>target`, tokens space-separated.
std::string serialize_example(const Example& ex);
/// Inverse of serialize_example. family/data_length are not stored in the
/// line; callers restore them from the manifest.
Example parse_example_line(const std::string& line, int lineno);

struct TaskSpec {
    Family family = Family::DirectPerm;
    int length_min = 1;
    int length_max = 1;
    int example_count = 0;
    std::uint64_t master_seed = 0;
    double split_ratios[3] = {1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0};

    // SwitchCorpus only: range case values are drawn from.
    long long value_min = -128;
    long long value_max = 127;

    void validate() const;
};

} // namespace permnet
