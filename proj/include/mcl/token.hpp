#pragma once

#include <utility>
#include <vector>

namespace mcl {

// One element of a model-ready sequence. Input tokens carry a raw embedding
// that the model pushes through its learnable input projector; code tokens
// name a row of the learnable vocabulary table.
enum class TokenKind { input, code };

struct Token {
    TokenKind kind = TokenKind::input;
    std::vector<double> vec;  // payload when kind == input
    int code = -1;            // vocabulary code when kind == code

    static Token from_vec(std::vector<double> v) {
        Token t;
        t.kind = TokenKind::input;
        t.vec = std::move(v);
        return t;
    }
    static Token from_code(int c) {
        Token t;
        t.kind = TokenKind::code;
        t.code = c;
        return t;
    }
};

} // namespace mcl
