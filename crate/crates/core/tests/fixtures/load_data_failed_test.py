def test_data_file_with_non_image_entries(self):
    # Create a data file with non-image entries
    mixed_data_file_path = os.path.join(self.test_dir, "mixed_data.txt")
    with open(mixed_data_file_path, 'wt') as f:
        f.write("input_image3.png annotation_image3.png\n")
        f.write("non_image_data.txt\n")
    # Try to load the mixed data file
    with self.assertRaises(ValueError):
        _load_data_files(mixed_data_file_path)
