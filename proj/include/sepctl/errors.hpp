#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace sepctl {

// Base for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class InvalidArgument : public Error {
public:
    using Error::Error;
};

// A computation produced a non-finite or out-of-domain value at a grid node.
class NumericalBlowup : public Error {
public:
    NumericalBlowup(const std::string& what, int node)
        : Error(what + " (node " + std::to_string(node) + ")"), node_(node) {}
    int node() const noexcept { return node_; }

private:
    int node_;
};

// Gain synthesis could not proceed (singular weights, ill-conditioned noise).
class SynthesisFailure : public Error {
public:
    SynthesisFailure(const std::string& what, int node)
        : Error(what + " (node " + std::to_string(node) + ")"), node_(node) {}
    int node() const noexcept { return node_; }

private:
    int node_;
};

// A control law asked for an observation it is not allowed to see yet.
class CausalityViolation : public Error {
public:
    CausalityViolation(int requested, int visible)
        : Error("control law read node " + std::to_string(requested) +
                " while only nodes <= " + std::to_string(visible) + " are visible"),
          requested_(requested), visible_(visible) {}
    int requested() const noexcept { return requested_; }
    int visible() const noexcept { return visible_; }

private:
    int requested_;
    int visible_;
};

struct ValidationIssue {
    std::string key;
    std::string message;
};

// Configuration errors; carries every issue found, not only the first.
class ValidationError : public Error {
public:
    explicit ValidationError(std::vector<ValidationIssue> issues)
        : Error(render(issues)), issues_(std::move(issues)) {}
    const std::vector<ValidationIssue>& issues() const noexcept { return issues_; }

private:
    static std::string render(const std::vector<ValidationIssue>& issues) {
        std::string out = "scenario validation failed:";
        for (const auto& i : issues) out += "\n  " + i.key + ": " + i.message;
        return out;
    }
    std::vector<ValidationIssue> issues_;
};

class IoError : public Error {
public:
    using Error::Error;
};

}  // namespace sepctl
