use std::fmt;

/// Number of significant bits in a logical log address.
pub const ADDRESS_BITS: u32 = 48;
pub const ADDRESS_MASK: u64 = (1 << ADDRESS_BITS) - 1;

/// Offset into a server's logical log. Zero is the null address.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Address(u64);

impl Address {
    pub const NULL: Address = Address(0);
    pub const MAX: Address = Address(ADDRESS_MASK);

    #[inline]
    pub const fn new(raw: u64) -> Self {
        Address(raw & ADDRESS_MASK)
    }

    #[inline]
    pub const fn raw(self) -> u64 {
        self.0
    }

    #[inline]
    pub const fn is_null(self) -> bool {
        self.0 == 0
    }

    #[inline]
    pub fn page(self, page_bits: u32) -> u64 {
        self.0 >> page_bits
    }

    #[inline]
    pub fn offset(self, page_bits: u32) -> u64 {
        self.0 & ((1 << page_bits) - 1)
    }

    #[inline]
    pub fn from_page(page: u64, page_bits: u32) -> Self {
        Address::new(page << page_bits)
    }

    #[inline]
    pub fn add(self, bytes: u64) -> Self {
        Address::new(self.0 + bytes)
    }
}

impl fmt::Debug for Address {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "@{:#x}", self.0)
    }
}

impl fmt::Display for Address {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#x}", self.0)
    }
}
