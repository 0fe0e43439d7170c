#pragma once

#include <stdexcept>
#include <string>

namespace armap {

// Root of every error the toolkit raises on purpose.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed file contents: bad header, bad JSON, bad JSONL line.
class FormatError : public Error {
 public:
  using Error::Error;
};

// Data offsets that overlap, point outside the file, or disagree with the shape.
class IntegrityError : public Error {
 public:
  using Error::Error;
};

class DtypeError : public Error {
 public:
  using Error::Error;
};

// A violated precondition on an argument value (fraction out of range,
// non-finite scale, empty batch, ...).
class ValueError : public Error {
 public:
  using Error::Error;
};

// Model paradigm does not match the requested likelihood (AR vs diffusion).
class ModeError : public Error {
 public:
  using Error::Error;
};

// A file that cannot be opened, read, or written.
class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace armap
