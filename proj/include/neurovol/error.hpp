#pragma once

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>

namespace neurovol {

// Invalid arguments are reported with std::invalid_argument. The types below
// cover the remaining failure kinds the store and pipeline distinguish.

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class NotFound : public Error {
public:
    using Error::Error;
};

/// Compare-and-set failure; carries the head the caller should rebase onto
/// (-1 when the conflict is not about a revision).
class Conflict : public Error {
public:
    Conflict(const std::string& what, std::int64_t head = -1) : Error(what), head_(head) {}
    [[nodiscard]] std::int64_t head() const noexcept { return head_; }

private:
    std::int64_t head_;
};

class PreconditionFailed : public Error {
public:
    PreconditionFailed(const std::string& what, std::map<std::string, std::size_t> counts = {})
        : Error(what), counts_(std::move(counts)) {}
    [[nodiscard]] const std::map<std::string, std::size_t>& counts() const noexcept { return counts_; }

private:
    std::map<std::string, std::size_t> counts_;
};

}  // namespace neurovol
