#pragma once

#include <stdexcept>
#include <string>

namespace swaptext {

// Every failure the library reports derives from Error so callers (the CLI in
// particular) can separate library errors from programming mistakes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InvalidInputError : public Error {
 public:
  using Error::Error;
};

class DegenerateGeometryError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class UnsupportedGlyphError : public Error {
 public:
  UnsupportedGlyphError(std::string glyph, const std::string& font)
      : Error("unsupported glyph '" + glyph + "' in font " + font),
        glyph_(std::move(glyph)) {}

  const std::string& glyph() const noexcept { return glyph_; }

 private:
  std::string glyph_;
};

class LoadError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  NumericError(std::string term, const std::string& message)
      : Error(message), term_(std::move(term)) {}

  const std::string& term() const noexcept { return term_; }

 private:
  std::string term_;
};

}  // namespace swaptext
