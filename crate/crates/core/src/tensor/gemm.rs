/// Panics if a strided `rows x cols` view would read past `len` elements.
pub(super) fn check_extent(rows: usize, cols: usize, len: usize, rs: isize, cs: isize) {
    if rows == 0 || cols == 0 {
        return;
    }
    assert!(rs >= 0 && cs >= 0, "negative strides are not supported");
    let last = (rows - 1) * rs as usize + (cols - 1) * cs as usize;
    assert!(
        last < len,
        "gemm view {rows}x{cols} (strides {rs},{cs}) exceeds buffer of {len}"
    );
}
