#include "permnet/tokens.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <stdexcept>

namespace permnet {

namespace {
const std::vector<std::string> kReserved = {"<pad>", "<sos>", "<eos>", "<sep>", "<unk>"};
} // namespace

Vocabulary::Vocabulary() {
    for (const auto& tok : kReserved) {
        ids_[tok] = static_cast<int>(tokens_.size());
        tokens_.push_back(tok);
    }
}

void Vocabulary::collect(const std::vector<std::string>& tokens) {
    for (const auto& tok : tokens) {
        if (ids_.count(tok) == 0) pending_.push_back(tok);
    }
}

void Vocabulary::finalize() {
    std::set<std::string> uniq(pending_.begin(), pending_.end());
    pending_.clear();
    for (const auto& tok : uniq) {
        if (ids_.count(tok) != 0) continue;
        ids_[tok] = static_cast<int>(tokens_.size());
        tokens_.push_back(tok);
    }
}

int Vocabulary::id(const std::string& tok) const {
    auto it = ids_.find(tok);
    return it == ids_.end() ? kUnk : it->second;
}

const std::string& Vocabulary::token(int id) const {
    if (id < 0 || id >= size()) throw std::out_of_range("token id out of range");
    return tokens_[static_cast<std::size_t>(id)];
}

std::vector<int> Vocabulary::encode(const std::vector<std::string>& tokens) const {
    std::vector<int> out;
    out.reserve(tokens.size());
    for (const auto& tok : tokens) out.push_back(id(tok));
    return out;
}

std::vector<std::string> Vocabulary::decode(const std::vector<int>& ids) const {
    std::vector<std::string> out;
    out.reserve(ids.size());
    for (int i : ids) out.push_back(token(i));
    return out;
}

void Vocabulary::save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write vocabulary file: " + path);
    for (const auto& tok : tokens_) out << tok << '\n';
}

Vocabulary Vocabulary::load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read vocabulary file: " + path);
    Vocabulary v;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        if (lineno < static_cast<int>(kReserved.size())) {
            if (line != kReserved[static_cast<std::size_t>(lineno)])
                throw std::runtime_error("vocabulary file " + path + ": line " +
                                         std::to_string(lineno + 1) + " is not the reserved token " +
                                         kReserved[static_cast<std::size_t>(lineno)]);
        } else {
            if (line.empty()) throw std::runtime_error("vocabulary file " + path + ": empty token at line " +
                                                       std::to_string(lineno + 1));
            if (v.ids_.count(line) != 0)
                throw std::runtime_error("vocabulary file " + path + ": duplicate token at line " +
                                         std::to_string(lineno + 1));
            v.ids_[line] = static_cast<int>(v.tokens_.size());
            v.tokens_.push_back(line);
        }
        ++lineno;
    }
    return v;
}

} // namespace permnet
