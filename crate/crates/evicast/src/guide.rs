//! The narrative guide. Each chapter of the book under `book/` is included
//! here as a doc-comment module so its code snippets compile and run as
//! doc-tests.
