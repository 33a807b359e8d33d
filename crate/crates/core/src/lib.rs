mod b64;
pub mod ratchet;
pub mod stream;
pub mod token;
pub mod message;
pub mod keystore;
pub mod directory;
pub mod io;
pub mod gui;
pub mod interceptor;
pub mod devapi;
pub mod sim;
