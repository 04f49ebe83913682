#pragma once

#include <string>
#include <unordered_map>
#include <vector>

namespace permnet {

/// Bijection token-string <-> token-id with fixed reserved control ids.
/// Non-reserved tokens are assigned ids 5.. in lexicographic order, so the
/// mapping is stable across corpus shuffles and re-loads.
class Vocabulary {
public:
    static constexpr int kPad = 0;
    static constexpr int kSos = 1;
    static constexpr int kEos = 2;
    static constexpr int kSep = 3;
    static constexpr int kUnk = 4;

    Vocabulary();

    /// Adds the non-reserved tokens of `tokens` to the pending set.
    void collect(const std::vector<std::string>& tokens);
    /// Sorts pending tokens and assigns ids. Idempotent.
    void finalize();

    int size() const { return static_cast<int>(tokens_.size()); }
    bool contains(const std::string& tok) const { return ids_.count(tok) != 0; }
    /// Returns kUnk for tokens not present.
    int id(const std::string& tok) const;
    const std::string& token(int id) const;

    std::vector<int> encode(const std::vector<std::string>& tokens) const;
    std::vector<std::string> decode(const std::vector<int>& ids) const;

    /// One token per line, line number = id.
    void save(const std::string& path) const;
    static Vocabulary load(const std::string& path);

    bool operator==(const Vocabulary& other) const { return tokens_ == other.tokens_; }

private:
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, int> ids_;
    std::vector<std::string> pending_;
};

} // namespace permnet
