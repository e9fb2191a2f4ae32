//! Compiles and runs every code sample in the guide as a doctest, keeping
//! the book in sync with the library.
