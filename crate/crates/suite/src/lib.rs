// SPDX-License-Identifier: MIT OR Apache-2.0

//! Host crate for the `acceptance` test target. It sits in its own package so
//! that the long-running suite executes after the unit and integration tests.
