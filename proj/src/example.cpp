#include "permnet/example.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace permnet {

std::string family_name(Family f) {
    switch (f) {
    case Family::DirectPerm: return "pd";
    case Family::IndirectPerm: return "pi";
    case Family::IndirectDict: return "pidict";
    case Family::SwitchCorpus: return "switch";
    }
    throw std::logic_error("unreachable family");
}

Family family_from_name(const std::string& name) {
    if (name == "pd") return Family::DirectPerm;
    if (name == "pi") return Family::IndirectPerm;
    if (name == "pidict") return Family::IndirectDict;
    if (name == "switch") return Family::SwitchCorpus;
    throw std::invalid_argument("unknown family: " + name);
}

namespace {

void join_tokens(std::string& out, const std::vector<std::string>& tokens) {
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (i != 0) out += ' ';
        out += tokens[i];
    }
}

std::vector<std::string> split_tokens(const std::string& text) {
    std::vector<std::string> out;
    std::istringstream in(text);
    std::string tok;
    while (in >> tok) out.push_back(tok);
    return out;
}

} // namespace

std::string serialize_example(const Example& ex) {
    std::string line;
    join_tokens(line, ex.source);
    line += '\t';
    join_tokens(line, ex.target);
    return line;
}

Example parse_example_line(const std::string& line, int lineno) {
    const auto tab = line.find('\t');
    if (tab == std::string::npos)
        throw std::runtime_error("dataset line " + std::to_string(lineno) + ": missing tab separator");
    if (line.find('\t', tab + 1) != std::string::npos)
        throw std::runtime_error("dataset line " + std::to_string(lineno) + ": more than one tab");
    Example ex;
    ex.source = split_tokens(line.substr(0, tab));
    ex.target = split_tokens(line.substr(tab + 1));
    if (ex.source.empty() || ex.target.empty())
        throw std::runtime_error("dataset line " + std::to_string(lineno) + ": empty source or target");
    return ex;
}

void TaskSpec::validate() const {
    if (length_min <= 0 || length_max <= 0) throw std::invalid_argument("lengths must be positive");
    if (length_min > length_max) throw std::invalid_argument("length_min exceeds length_max");
    if (example_count <= 0) throw std::invalid_argument("example_count must be positive");
    double sum = 0.0;
    for (double r : split_ratios) {
        if (r < 0.0) throw std::invalid_argument("split ratios must be non-negative");
        sum += r;
    }
    if (std::abs(sum - 1.0) > 1e-9) throw std::invalid_argument("split ratios must sum to 1");
    if (family == Family::SwitchCorpus) {
        if (length_min < 2) throw std::invalid_argument("switch corpus needs at least 2 cases");
        const long long span = value_max - value_min + 1;
        if (span < length_max) throw std::invalid_argument("value range too small for requested case count");
    }
}

} // namespace permnet
