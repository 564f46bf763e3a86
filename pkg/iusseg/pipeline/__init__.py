__all__ = ['ppln_config', 'ppln_split', 'ppln_dataset', 'ppln']
