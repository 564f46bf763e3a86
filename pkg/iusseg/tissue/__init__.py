__all__ = ['tss', 'tss_phantom']
